// Tuning session: slider state, debounced what-if requests, and the
// monotone-render guarantee (a response older than the one on screen is
// dropped, no matter how late it arrives).

import { ApiClient, PlanDocument, PlanResponse } from "./api.js";

export const DEBOUNCE_MS = 150;

export interface SetWeightResult {
  value: number;
  clamped: boolean;
}

export interface SessionHooks {
  onPlan: (response: PlanResponse) => void;
  onError?: (error: unknown) => void;
}

export function clampWeight(value: number): SetWeightResult {
  if (Number.isNaN(value)) return { value: 0, clamped: true };
  if (value < 0) return { value: 0, clamped: true };
  if (value > 1) return { value: 1, clamped: true };
  return { value, clamped: false };
}

export class TuningSession {
  readonly weights = new Map<string, number>();
  baseline: PlanDocument | null = null;
  /** The plan currently on screen; tuning moves diff against this. */
  rendered: PlanDocument | null = null;
  dirty = false;

  private sequence = 0;
  private renderedSequence = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly hooks: SessionHooks,
    private readonly debounceMs: number = DEBOUNCE_MS,
  ) {}

  /** Load the persisted plan and seed slider state from its criteria. */
  async loadBaseline(): Promise<PlanDocument> {
    const response = await this.api.ranked();
    this.baseline = response.plan;
    this.rendered = response.plan;
    const first = response.plan.entries[0];
    this.weights.clear();
    if (first) {
      for (const criterion of first.breakdown) {
        this.weights.set(criterion.name, criterion.weight);
      }
    }
    this.dirty = false;
    return response.plan;
  }

  criteriaNames(): string[] {
    return [...this.weights.keys()];
  }

  /** Slider movement: clamp, mark dirty, schedule a debounced what-if. */
  setWeight(name: string, value: number): SetWeightResult {
    const result = clampWeight(value);
    this.weights.set(name, result.value);
    this.dirty = true;
    this.schedule();
    return result;
  }

  /** Multiplier control: scale every weight, clamped into [0, 1]. */
  scaleAll(factor: number): void {
    for (const [name, weight] of this.weights) {
      this.weights.set(name, clampWeight(weight * factor).value);
    }
    this.dirty = true;
    this.schedule();
  }

  private schedule(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.flush();
    }, this.debounceMs);
  }

  /** Send the current weights now; stale responses are discarded. */
  async flush(): Promise<void> {
    const sequence = ++this.sequence;
    try {
      const response = await this.api.whatif(
        Object.fromEntries(this.weights),
        sequence,
      );
      if (sequence <= this.renderedSequence) return; // stale: newer already shown
      this.renderedSequence = sequence;
      this.hooks.onPlan(response);
    } catch (error) {
      this.hooks.onError?.(error);
    }
  }

  /** True when a new plan leaves the on-screen ordering untouched. */
  orderingUnchanged(plan: PlanDocument): boolean {
    if (!this.rendered) return false;
    const shownOrder = this.rendered.entries.map((e) => e.test_id);
    const nextOrder = plan.entries.map((e) => e.test_id);
    return (
      shownOrder.length === nextOrder.length &&
      shownOrder.every((id, i) => id === nextOrder[i])
    );
  }

  /** Rank movement per test versus the on-screen plan (positive = moved up). */
  rankDeltas(plan: PlanDocument): Map<string, number> {
    const deltas = new Map<string, number>();
    if (!this.rendered) return deltas;
    const shownRank = new Map(
      this.rendered.entries.map((e) => [e.test_id, e.rank]),
    );
    for (const entry of plan.entries) {
      const before = shownRank.get(entry.test_id);
      if (before !== undefined) deltas.set(entry.test_id, before - entry.rank);
    }
    return deltas;
  }

  /** Record the plan now on screen; called after the table re-renders. */
  commitRendered(plan: PlanDocument): void {
    this.rendered = plan;
  }
}
