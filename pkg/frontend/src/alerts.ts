// Commit risk panel: score gauge against the acceptance threshold, signed
// contribution bars sorted by magnitude, and a footnote proving the bars
// plus base reproduce the model's raw output.
//
// The threshold slider reclassifies locally (score >= threshold), the one
// piece of domain math the client is allowed; scores are never refetched.

import { CommitExplanation, CommitRisk } from "./api.js";
import { clear, el, fmt } from "./dom.js";

export interface AlertView {
  setThreshold(threshold: number): void;
}

export function renderCommitAlert(
  target: HTMLElement,
  risk: CommitRisk,
  explanation: CommitExplanation,
): AlertView {
  clear(target);

  const gaugeFill = el("div", {
    class: "gauge-fill",
    style: `width: ${(risk.score * 100).toFixed(1)}%`,
  });
  const gaugeMark = el("div", { class: "gauge-mark" });
  const verdict = el("span", { class: "verdict", "data-role": "verdict" });
  const thresholdLabel = el("span", { class: "threshold-label" });

  const applyThreshold = (threshold: number) => {
    const alert = risk.score >= threshold;
    verdict.textContent = alert ? "alert" : "pass";
    verdict.className = alert ? "verdict alert" : "verdict pass";
    gaugeMark.style.left = `${(threshold * 100).toFixed(1)}%`;
    thresholdLabel.textContent = `threshold ${fmt(threshold, 2)}`;
  };

  const slider = el("input", {
    type: "range", min: "0.01", max: "0.99", step: "0.01",
    value: String(risk.threshold), class: "threshold-slider",
    oninput: (event) => {
      applyThreshold(Number((event.target as HTMLInputElement).value));
    },
  }) as HTMLInputElement;

  const sorted = [...explanation.contributions]
    .filter((c) => c.contribution !== 0)
    .sort((a, b) => Math.abs(b.contribution) - Math.abs(a.contribution));
  const largest = Math.max(...sorted.map((c) => Math.abs(c.contribution)), 1e-12);
  const bars = sorted.slice(0, 12).map((c) =>
    el("div", { class: "bar-row", "data-feature": c.feature },
      el("span", { class: "bar-name" }, c.feature),
      el("div", { class: "bar-track" },
        el("div", {
          class: c.contribution >= 0 ? "bar positive" : "bar negative",
          style: `width: ${(Math.abs(c.contribution) / largest * 100).toFixed(1)}%`,
        })),
      el("span", { class: "bar-value" }, fmt(c.contribution, 4)),
    ),
  );

  const barSum = explanation.contributions.reduce(
    (total, c) => total + c.contribution, 0);
  const reconstructed = explanation.base + barSum;
  const footnote = el("p", {
    class: "footnote",
    "data-role": "local-accuracy",
    "data-base": String(explanation.base),
    "data-bar-sum": String(barSum),
    "data-raw": String(explanation.prediction_raw),
  }, `base ${fmt(explanation.base, 4)} + bars ${fmt(barSum, 4)} = `
     + `${fmt(reconstructed, 4)} (model raw ${fmt(explanation.prediction_raw, 4)})`);

  target.append(
    el("h3", {}, `${risk.commit_id}`,
       el("span", { class: "score", "data-role": "score" },
          ` score ${fmt(risk.score, 4)}`)),
    el("div", { class: "gauge" }, gaugeFill, gaugeMark),
    el("div", { class: "threshold-row" }, verdict, slider, thresholdLabel),
    el("div", { class: "bars" }, ...bars),
    footnote,
  );
  applyThreshold(risk.threshold);
  return { setThreshold: applyThreshold };
}

export function renderNoModel(target: HTMLElement, message: string): void {
  clear(target);
  target.append(el("p", { class: "empty" }, message));
}
