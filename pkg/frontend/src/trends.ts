// Run history chart: selected-count and bugs-found-per-hour series straight
// from the run summaries; hovering a point shows the run's artifact digests.

import { RunSummary } from "./api.js";
import { clear, el } from "./dom.js";

const WIDTH = 560;
const HEIGHT = 150;
const PAD = 24;

function selectionMetric(run: RunSummary, key: string): number {
  for (const stage of Object.values(run.summary)) {
    if (stage && typeof stage === "object" && key in stage) {
      const value = (stage as Record<string, unknown>)[key];
      if (typeof value === "number") return value;
    }
  }
  return 0;
}

function svgEl(tag: string, attrs: Record<string, string | number>): SVGElement {
  const node = document.createElementNS("http://www.w3.org/2000/svg", tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, String(value));
  }
  return node;
}

function series(
  svg: SVGElement,
  runs: RunSummary[],
  metric: string,
  cssClass: string,
): void {
  const values = runs.map((run) => selectionMetric(run, metric));
  const top = Math.max(...values, 1e-9);
  const step = runs.length > 1 ? (WIDTH - 2 * PAD) / (runs.length - 1) : 0;
  const points = values.map((value, i) => ({
    x: PAD + i * step,
    y: HEIGHT - PAD - (value / top) * (HEIGHT - 2 * PAD),
  }));
  if (points.length > 1) {
    svg.append(svgEl("polyline", {
      class: `line ${cssClass}`,
      fill: "none",
      points: points.map((p) => `${p.x},${p.y}`).join(" "),
    }));
  }
  points.forEach((point, i) => {
    const run = runs[i]!;
    const circle = svgEl("circle", {
      class: `point ${cssClass}`,
      cx: point.x, cy: point.y, r: 4,
      "data-run-id": run.run_id,
      "data-metric": metric,
      "data-value": String(values[i]),
    });
    const digests = Object.entries(run.artifact_digests)
      .map(([name, digest]) => `${name}: ${digest.slice(0, 12)}`)
      .join("\n");
    const title = svgEl("title", {});
    title.textContent = `${run.run_id} ${metric}=${values[i]}\n${digests}`;
    circle.append(title);
    svg.append(circle);
  });
}

export function renderTrends(target: HTMLElement, runs: RunSummary[]): void {
  clear(target);
  if (runs.length === 0) {
    target.append(el("p", { class: "empty" }, "no runs recorded yet"));
    return;
  }
  const svg = svgEl("svg", {
    viewBox: `0 0 ${WIDTH} ${HEIGHT}`,
    width: WIDTH, height: HEIGHT, class: "trend-chart",
  });
  series(svg, runs, "selected", "selected-series");
  series(svg, runs, "bugs_found_per_hour", "bugs-series");
  target.append(
    el("div", { class: "legend" },
      el("span", { class: "key selected-series" }, "selected tests"),
      el("span", { class: "key bugs-series" }, "bugs found / hour")),
    svg as unknown as Node,
  );
}
