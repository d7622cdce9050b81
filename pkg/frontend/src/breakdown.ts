// Per-test factor panel: P, I, T, R plus each criterion's normalized value
// and weight, verbatim from the plan payload.

import { PlanEntry } from "./api.js";
import { clear, el, fmt } from "./dom.js";

export function renderBreakdown(target: HTMLElement, entry: PlanEntry | null): void {
  clear(target);
  if (!entry) {
    target.append(el("p", { class: "empty" }, "select a test to inspect its factors"));
    return;
  }
  const header = el("div", { class: "factors" },
    el("span", { class: "factor" }, `P ${fmt(entry.probability)}`),
    el("span", { class: "factor" }, `I ${fmt(entry.impact)}`),
    el("span", { class: "factor" }, `T ${fmt(entry.time)}`),
    el("span", { class: "factor exposure", "data-role": "exposure" },
       `R ${fmt(entry.exposure)}`),
  );
  const title = el("h3", {}, entry.test_id);
  if (entry.stale_reason) {
    title.append(el("span", { class: "badge stale" }, entry.stale_reason));
  }
  const rows = entry.breakdown.map((criterion) =>
    el("tr", { "data-criterion": criterion.name },
      el("td", {}, criterion.name),
      el("td", {}, criterion.kind),
      el("td", {}, fmt(criterion.raw)),
      el("td", { class: "normalized" }, fmt(criterion.normalized)),
      el("td", { class: "weight" }, fmt(criterion.weight, 2)),
      el("td", {}, fmt(criterion.share)),
    ),
  );
  target.append(
    title,
    header,
    el("table", { class: "breakdown" },
      el("thead", {}, el("tr", {},
        ...["criterion", "kind", "raw", "normalized", "weight", "share"].map(
          (h) => el("th", {}, h)))),
      el("tbody", {}, ...rows)),
  );
}
