// Ranked-plan table. Row order always mirrors the service payload order;
// the only client-side annotation is the rank movement versus the baseline.

import { PlanDocument } from "./api.js";
import { clear, el, fmt } from "./dom.js";

export function renderRankingStatus(target: HTMLElement, unchanged: boolean,
                                    ephemeral: boolean): void {
  clear(target);
  target.append(
    el("span", { class: ephemeral ? "tag whatif" : "tag persisted" },
       ephemeral ? "what-if preview" : "persisted plan"),
  );
  if (ephemeral && unchanged) {
    target.append(el("span", { class: "tag unchanged" }, "ranking unchanged"));
  }
}

function deltaBadge(delta: number | undefined): HTMLElement {
  if (!delta) return el("span", { class: "delta none" }, "–");
  const up = delta > 0;
  return el(
    "span",
    { class: up ? "delta up" : "delta down" },
    `${up ? "▲" : "▼"} ${Math.abs(delta)}`,
  );
}

export function renderRankingTable(
  target: HTMLElement,
  plan: PlanDocument,
  deltas: Map<string, number>,
  onSelect: (testId: string) => void,
): void {
  clear(target);
  const head = el(
    "tr", {},
    ...["rank", "Δ", "test", "R", "P", "I", "T", "selected", "stale"].map(
      (h) => el("th", {}, h)),
  );
  const rows = plan.entries.map((entry) =>
    el(
      "tr",
      {
        class: entry.selected ? "row selected" : "row",
        "data-test-id": entry.test_id,
        onclick: () => onSelect(entry.test_id),
      },
      el("td", {}, String(entry.rank)),
      el("td", {}, deltaBadge(deltas.get(entry.test_id))),
      el("td", { class: "test-id" }, entry.test_id),
      el("td", {}, fmt(entry.exposure)),
      el("td", {}, fmt(entry.probability)),
      el("td", {}, fmt(entry.impact)),
      el("td", {}, fmt(entry.time)),
      el("td", {}, entry.selected ? "yes" : "no"),
      el("td", {}, entry.stale_reason
        ? el("span", { class: "badge stale" }, entry.stale_reason)
        : ""),
    ),
  );
  target.append(el("table", { class: "ranking" }, el("thead", {}, head),
                   el("tbody", {}, ...rows)));
}
