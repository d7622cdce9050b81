// Application wiring: sliders -> session -> table; commit lookups; trends.

import { ApiClient, ApiError, PlanDocument, PlanEntry, PlanResponse } from "./api.js";
import { renderCommitAlert, renderNoModel } from "./alerts.js";
import { renderBreakdown } from "./breakdown.js";
import { clear, el, fmt } from "./dom.js";
import { renderRankingStatus, renderRankingTable } from "./ranking.js";
import { TuningSession } from "./session.js";
import { renderTrends } from "./trends.js";
import { renderTreeViewer, type TreeDoc } from "./treeview.js";

const POLL_MS = 2000;

export interface App {
  session: TuningSession;
  refreshTrends(): Promise<void>;
  showCommit(commitId: string): Promise<void>;
}

function entryById(plan: PlanDocument, testId: string): PlanEntry | null {
  return plan.entries.find((e) => e.test_id === testId) ?? null;
}

export async function initApp(root: HTMLElement, baseUrl = ""): Promise<App> {
  const api = new ApiClient(baseUrl);

  root.append(
    el("header", {},
      el("h1", {}, "test selection tuning"),
      el("div", { id: "status-banner", class: "banner hidden" })),
    el("section", { class: "columns" },
      el("div", { class: "col" },
        el("h2", {}, "criterion weights"),
        el("div", { id: "sliders" }),
        el("div", { class: "scale-row" },
          el("label", {}, "scale all ×"),
          el("input", { id: "scale-factor", type: "number", step: "0.1",
                        value: "2.0" }),
          el("button", { id: "scale-apply" }, "apply")),
        el("div", { id: "ranking-status", class: "status-row" }),
        el("div", { id: "ranking" })),
      el("div", { class: "col" },
        el("h2", {}, "factor breakdown"),
        el("div", { id: "breakdown" }),
        el("h2", {}, "commit risk"),
        el("div", { class: "commit-row" },
          el("input", { id: "commit-id", type: "text",
                        placeholder: "commit id, e.g. CL0005" }),
          el("button", { id: "commit-load" }, "inspect")),
        el("div", { id: "alert-panel" }),
        el("h2", {}, "pipeline runs"),
        el("div", { class: "run-row" },
          el("button", { id: "run-trigger" }, "run pipeline"),
          el("span", { id: "run-state" })),
        el("div", { id: "trends" }),
        el("h2", {}, "metric formulas"),
        el("div", { id: "tree-viewer" }))),
  );

  const banner = root.querySelector("#status-banner") as HTMLElement;
  const slidersBox = root.querySelector("#sliders") as HTMLElement;
  const statusBox = root.querySelector("#ranking-status") as HTMLElement;
  const rankingBox = root.querySelector("#ranking") as HTMLElement;
  const breakdownBox = root.querySelector("#breakdown") as HTMLElement;
  const alertBox = root.querySelector("#alert-panel") as HTMLElement;
  const trendsBox = root.querySelector("#trends") as HTMLElement;
  const runState = root.querySelector("#run-state") as HTMLElement;

  let currentPlan: PlanDocument | null = null;
  let selectedTest: string | null = null;

  const showError = (error: unknown) => {
    banner.textContent = error instanceof Error ? error.message : String(error);
    banner.className = "banner error";
  };
  const clearError = () => {
    banner.textContent = "";
    banner.className = "banner hidden";
  };

  const renderPlan = (response: PlanResponse) => {
    clearError();
    currentPlan = response.plan;
    const unchanged = session.orderingUnchanged(response.plan);
    const deltas = session.rankDeltas(response.plan);
    renderRankingStatus(statusBox, unchanged, response.ephemeral);
    renderRankingTable(rankingBox, response.plan, deltas,
                       (testId) => {
                         selectedTest = testId;
                         renderBreakdown(breakdownBox,
                                         entryById(response.plan, testId));
                       });
    if (selectedTest) {
      renderBreakdown(breakdownBox, entryById(response.plan, selectedTest));
    }
    session.commitRendered(response.plan);
  };

  const session = new TuningSession(api, { onPlan: renderPlan, onError: showError });

  const renderSliders = () => {
    clear(slidersBox);
    for (const name of session.criteriaNames()) {
      const weight = session.weights.get(name) ?? 0;
      const valueLabel = el("span", { class: "slider-value" }, fmt(weight, 2));
      const slider = el("input", {
        type: "range", min: "0", max: "1", step: "0.01",
        value: String(weight), "data-criterion": name,
        oninput: (event) => {
          const input = event.target as HTMLInputElement;
          const result = session.setWeight(name, Number(input.value));
          input.value = String(result.value);
          valueLabel.textContent = fmt(result.value, 2);
          input.classList.toggle("clamped", result.clamped);
        },
      });
      slidersBox.append(el("div", { class: "slider-row" },
                           el("label", {}, name), slider, valueLabel));
    }
  };

  try {
    const baseline = await session.loadBaseline();
    renderPlan({ ephemeral: false, plan: baseline });
    renderSliders();
  } catch (error) {
    if (error instanceof ApiError && error.status === 404) {
      banner.textContent = "no scoring run yet; trigger the pipeline below";
      banner.className = "banner info";
    } else {
      showError(error);
    }
  }

  (root.querySelector("#scale-apply") as HTMLElement).addEventListener("click", () => {
    const factor = Number((root.querySelector("#scale-factor") as HTMLInputElement).value);
    if (Number.isFinite(factor) && factor > 0) {
      session.scaleAll(factor);
      renderSliders();
    }
  });

  const showCommit = async (commitId: string) => {
    try {
      const [risk, explanation] = await Promise.all([
        api.commitRisk(commitId),
        api.commitExplanation(commitId),
      ]);
      renderCommitAlert(alertBox, risk, explanation);
      clearError();
    } catch (error) {
      if (error instanceof ApiError && (error.status === 409 || error.status === 404)) {
        renderNoModel(alertBox, error.message);
      } else {
        showError(error);
      }
    }
  };

  (root.querySelector("#commit-load") as HTMLElement).addEventListener("click", () => {
    const commitId = (root.querySelector("#commit-id") as HTMLInputElement).value.trim();
    if (commitId) void showCommit(commitId);
  });

  const refreshTrends = async () => {
    try {
      renderTrends(trendsBox, await api.runs());
    } catch {
      renderTrends(trendsBox, []);
    }
  };
  await refreshTrends();

  const treeBox = root.querySelector("#tree-viewer") as HTMLElement;
  try {
    const doc = await fetch(baseUrl + "/trees").then((r) => r.json());
    renderTreeViewer(treeBox, doc.trees as TreeDoc[]);
  } catch {
    renderTreeViewer(treeBox, []);
  }

  (root.querySelector("#run-trigger") as HTMLElement).addEventListener("click", () => {
    void (async () => {
      try {
        const pipeline = await pipelineName(api);
        const state = await api.triggerRun(pipeline);
        runState.textContent = state.state;
        const poll = setInterval(() => {
          void (async () => {
            const status = await api.runStatus(pipeline);
            runState.textContent = status.state;
            if (status.state === "done" || status.state === "failed") {
              clearInterval(poll);
              await refreshTrends();
              if (status.state === "done") {
                const baseline = await session.loadBaseline();
                renderPlan({ ephemeral: false, plan: baseline });
                renderSliders();
              }
            }
          })();
        }, POLL_MS);
      } catch (error) {
        showError(error);
      }
    })();
  });

  return { session, refreshTrends, showCommit };
}

async function pipelineName(api: ApiClient): Promise<string> {
  const health = await fetch(api.baseUrl + "/healthz").then((r) => r.json());
  return health.pipeline as string;
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  const base = (window as { RISKPILOT_BASE_URL?: string }).RISKPILOT_BASE_URL ?? "";
  void initApp(document.getElementById("app") as HTMLElement, base);
}
