import { describe, expect, it } from "vitest";

import { ClientViewModel } from "../src/viewmodel.js";
import { ClientMessage, FrameMessage, SceneEcho } from "../src/protocol.js";

function harness() {
  const sent: ClientMessage[] = [];
  const vm = new ClientViewModel({ send: (m) => sent.push(m) });
  return { vm, sent };
}

const sceneEcho: SceneEcho = {
  version: 3,
  camera: {
    position: [10, 10, -30],
    look_at: [8, 8, 8],
    up: [0, 1, 0],
    vertical_fov: 0.8,
    image_size: [64, 36],
  },
  settings: { active_set: [0, 2], interpolation: true, step_length: 0.5 },
  chain_texts: { "0": "", "1": "length" },
  value_ranges: { "0": [0.4, 1.7] },
  render_period: 2,
};

function frame(step: number, scene = sceneEcho): FrameMessage {
  return {
    type: "frame",
    step,
    image: { width: 1, height: 1, encoding: "raw-rgba8", data: "AAAAAA==" },
    metadata: { step, density_sum: [1.0] },
    scene,
  };
}

describe("session handling", () => {
  it("connect asks for the session list", () => {
    const { vm, sent } = harness();
    vm.onStatus("connected");
    expect(sent).toEqual([{ type: "list" }]);
  });

  it("reconnect re-observes the previous session", () => {
    const { vm, sent } = harness();
    vm.onServerMessage({
      type: "sessions",
      sessions: [{ id: 5, name: "toy", ranks: 8, sources: [] }],
    });
    vm.onServerMessage({ type: "observing", session_id: 5 });
    vm.onStatus("disconnected");
    vm.onStatus("connected");
    expect(sent).toContainEqual({ type: "observe", session_id: 5 });
  });

  it("a vanished session clears the observed state", () => {
    const { vm } = harness();
    vm.onServerMessage({
      type: "sessions",
      sessions: [{ id: 1, name: "a", ranks: 1, sources: [] }],
    });
    vm.onServerMessage({ type: "observing", session_id: 1 });
    expect(vm.observed?.id).toBe(1);
    vm.onServerMessage({ type: "sessions", sessions: [] });
    expect(vm.observed).toBeNull();
  });
});

describe("frames and scene echo", () => {
  it("latest frame wins, metadata and scene state track it", () => {
    const { vm } = harness();
    vm.onServerMessage(frame(1));
    vm.onServerMessage(frame(2));
    expect(vm.frames.dropped).toBe(1);
    expect(vm.frames.take()?.step).toBe(2);
    expect(vm.lastStep).toBe(2);
    expect(vm.metadata.step).toBe(2);
    expect(vm.sceneEcho?.render_period).toBe(2);
  });

  it("controls reflect the acknowledged scene", () => {
    const { vm } = harness();
    vm.onServerMessage(frame(1));
    expect(vm.isActive(0)).toBe(true);
    expect(vm.isActive(1)).toBe(false);
    expect(vm.chainText(1)).toBe("length");
    expect(vm.valueRange(0)).toEqual([0.4, 1.7]);
  });

  it("errors surface visibly", () => {
    const { vm } = harness();
    vm.onServerMessage({ type: "error", error: "steer requires observing a session" });
    expect(vm.lastError).toMatch(/observing/);
  });
});

describe("gestures emit exactly one message", () => {
  it("run controls", () => {
    const { vm, sent } = harness();
    vm.pause();
    vm.resume();
    vm.stepOnce();
    vm.exit();
    expect(sent.map((m) => (m.payload as { action: string }).action)).toEqual([
      "pause", "resume", "step", "exit",
    ]);
  });

  it("chain submit carries text verbatim", () => {
    const { vm, sent } = harness();
    vm.submitChain(1, "mul(0,1,0) | sum");
    expect(sent).toEqual([
      {
        type: "steer",
        payload: { action: "set_functor_chain", source_id: 1, text: "mul(0,1,0) | sum" },
      },
    ]);
  });

  it("source toggle flips membership of the acknowledged active set", () => {
    const { vm, sent } = harness();
    vm.onServerMessage(frame(1));
    vm.toggleSource(1);
    expect(sent.at(-1)).toEqual({
      type: "steer",
      payload: { action: "set_active_sources", ids: [0, 1, 2] },
    });
    vm.toggleSource(0);
    expect(sent.at(-1)).toEqual({
      type: "steer",
      payload: { action: "set_active_sources", ids: [0, 2] },
    });
  });

  it("camera drag keeps the look-at point and orbit radius", () => {
    const { vm, sent } = harness();
    vm.onServerMessage(frame(1));
    vm.dragCamera(0.2, 0.1);
    const payload = sent.at(-1)!.payload as {
      action: string; position: number[]; look_at: number[];
    };
    expect(payload.action).toBe("set_camera");
    expect(payload.look_at).toEqual([8, 8, 8]);
    const r = (p: number[]) =>
      Math.hypot(p[0] - 8, p[1] - 8, p[2] - 8);
    expect(r(payload.position)).toBeCloseTo(r([10, 10, -30]), 8);
  });

  it("camera drag without scene state is a no-op", () => {
    const { vm, sent } = harness();
    vm.dragCamera(0.2, 0.1);
    expect(sent).toEqual([]);
  });

  it("transfer function submit serializes sorted points", () => {
    const { vm, sent } = harness();
    vm.submitTransferFunction(0, [
      { t: 1, r: 1, g: 1, b: 1, a: 1 },
      { t: 0, r: 0, g: 0, b: 0, a: 0 },
    ]);
    expect(sent[0].payload).toEqual({
      action: "set_transfer_function",
      source_id: 0,
      points: [
        [0, 0, 0, 0, 0],
        [1, 1, 1, 1, 1],
      ],
    });
  });
});
