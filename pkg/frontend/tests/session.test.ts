import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import type { ApiClient, PlanDocument, PlanResponse } from "../src/api.js";
import { clampWeight, TuningSession } from "../src/session.js";

function planWith(order: string[], weights: Record<string, number> = { w1: 0.5 }): PlanDocument {
  return {
    budget: { kind: "count", value: 2 },
    computed_on: "2025-09-30",
    entries: order.map((id, i) => ({
      rank: i + 1,
      test_id: id,
      exposure: 10 - i,
      probability: 5,
      impact: 2,
      time: 0.5,
      selected: i < 2,
      stale_reason: "",
      breakdown: Object.entries(weights).map(([name, weight]) => ({
        name, kind: "probability" as const, raw: 1, normalized: 1, weight, share: 1,
      })),
    })),
  };
}

function response(order: string[], sequence?: number): PlanResponse {
  const doc: PlanResponse = { ephemeral: true, plan: planWith(order) };
  if (sequence !== undefined) doc.sequence = sequence;
  return doc;
}

describe("clampWeight", () => {
  it("keeps in-range values", () => {
    expect(clampWeight(0.4)).toEqual({ value: 0.4, clamped: false });
  });
  it("clamps out-of-range input with a cue", () => {
    expect(clampWeight(1.7)).toEqual({ value: 1, clamped: true });
    expect(clampWeight(-0.2)).toEqual({ value: 0, clamped: true });
    expect(clampWeight(Number.NaN)).toEqual({ value: 0, clamped: true });
  });
});

describe("TuningSession", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  function makeSession(
    whatif: (overrides: Record<string, number>, sequence: number) => Promise<PlanResponse>,
  ) {
    const rendered: PlanResponse[] = [];
    const api = {
      ranked: async () => ({ ephemeral: false, plan: planWith(["A", "B", "C"]) }),
      whatif,
    } as unknown as ApiClient;
    const session = new TuningSession(api, { onPlan: (r) => rendered.push(r) });
    return { session, rendered };
  }

  it("seeds slider state from the baseline plan's criteria", async () => {
    const { session } = makeSession(async () => response(["A"]));
    await session.loadBaseline();
    expect(session.criteriaNames()).toEqual(["w1"]);
    expect(session.weights.get("w1")).toBe(0.5);
    expect(session.dirty).toBe(false);
  });

  it("debounces rapid slider changes into one request", async () => {
    const calls: Record<string, number>[] = [];
    const { session } = makeSession(async (overrides) => {
      calls.push(overrides);
      return response(["A", "B", "C"]);
    });
    await session.loadBaseline();
    session.setWeight("w1", 0.1);
    session.setWeight("w1", 0.2);
    session.setWeight("w1", 0.3);
    expect(calls).toHaveLength(0);
    await vi.advanceTimersByTimeAsync(149);
    expect(calls).toHaveLength(0); // debounce is at least 150 ms
    await vi.advanceTimersByTimeAsync(1);
    expect(calls).toHaveLength(1);
    expect(calls[0]).toEqual({ w1: 0.3 });
    expect(session.dirty).toBe(true);
  });

  it("discards responses older than the one on screen", async () => {
    const pending: Array<(r: PlanResponse) => void> = [];
    const { session, rendered } = makeSession(
      (_overrides, sequence) =>
        new Promise((resolve) => {
          pending.push((r) => resolve({ ...r, sequence }));
        }),
    );
    await session.loadBaseline();
    void session.flush(); // sequence 1, slow
    void session.flush(); // sequence 2, fast
    expect(pending).toHaveLength(2);
    pending[1]!(response(["C", "B", "A"]));
    await vi.runAllTimersAsync();
    expect(rendered).toHaveLength(1);
    expect(rendered[0]!.sequence).toBe(2);
    pending[0]!(response(["B", "A", "C"])); // late sequence-1 answer
    await vi.runAllTimersAsync();
    expect(rendered).toHaveLength(1); // never displayed
  });

  it("scales every weight uniformly, clamped into range", async () => {
    const { session } = makeSession(async () => response(["A"]));
    session.weights.set("a", 0.4);
    session.weights.set("b", 0.8);
    session.scaleAll(2);
    expect(session.weights.get("a")).toBe(0.8);
    expect(session.weights.get("b")).toBe(1); // clamped
  });

  it("reports unchanged ordering and rank deltas against the baseline", async () => {
    const { session } = makeSession(async () => response(["A", "B", "C"]));
    await session.loadBaseline();
    expect(session.orderingUnchanged(planWith(["A", "B", "C"]))).toBe(true);
    const moved = planWith(["B", "A", "C"]);
    expect(session.orderingUnchanged(moved)).toBe(false);
    const deltas = session.rankDeltas(moved);
    expect(deltas.get("B")).toBe(1); // up one
    expect(deltas.get("A")).toBe(-1); // down one
    expect(deltas.get("C")).toBe(0);
  });

  it("routes request failures to the error hook", async () => {
    const errors: unknown[] = [];
    const api = {
      whatif: async () => {
        throw new Error("connection lost");
      },
    } as unknown as ApiClient;
    const session = new TuningSession(api, {
      onPlan: () => undefined,
      onError: (e) => errors.push(e),
    });
    await session.flush();
    expect(errors).toHaveLength(1);
  });
});
