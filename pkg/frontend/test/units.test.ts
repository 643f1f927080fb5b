import { describe, expect, it } from "vitest";

import { Mailbox } from "../src/mailbox.js";
import { base64ToBytes, decodeRawFrame, FrameDecodeError } from "../src/frames.js";
import {
  defaultPoints,
  deserializePoints,
  isMonotone,
  normalizePoints,
  serializePoints,
} from "../src/transfer.js";
import { length, orbit, zoom, Vec3 } from "../src/camera.js";

describe("mailbox", () => {
  it("newest value wins and drops are counted", () => {
    const box = new Mailbox<number>();
    expect(box.take()).toBeNull();
    box.put(1);
    box.put(2);
    box.put(3);
    expect(box.dropped).toBe(2);
    expect(box.take()).toBe(3);
    expect(box.take()).toBeNull();
  });
});

describe("frame decoding", () => {
  it("decodes raw-rgba8 and forces opaque alpha", () => {
    const bytes = new Uint8Array([10, 20, 30, 40, 50, 60, 70, 80]);
    const data = Buffer.from(bytes).toString("base64");
    const frame = decodeRawFrame({ width: 2, height: 1, encoding: "raw-rgba8", data });
    expect(frame.width).toBe(2);
    expect([...frame.rgba]).toEqual([10, 20, 30, 255, 50, 60, 70, 255]);
  });

  it("rejects size mismatches loudly", () => {
    const data = Buffer.from([1, 2, 3, 4]).toString("base64");
    expect(() =>
      decodeRawFrame({ width: 2, height: 2, encoding: "raw-rgba8", data }),
    ).toThrow(FrameDecodeError);
  });

  it("round-trips base64", () => {
    const bytes = new Uint8Array(Array.from({ length: 64 }, (_, i) => (i * 7) % 256));
    const encoded = Buffer.from(bytes).toString("base64");
    expect([...base64ToBytes(encoded)]).toEqual([...bytes]);
  });
});

describe("transfer function editor", () => {
  it("serialization is monotone in t and lossless", () => {
    const scrambled = [
      { t: 0.9, r: 1, g: 0, b: 0, a: 1 },
      { t: 0.1, r: 0, g: 0, b: 1, a: 0.2 },
      { t: 0.5, r: 0, g: 1, b: 0, a: 0.6 },
    ];
    const rows = serializePoints(scrambled);
    expect(rows.map((r) => r[0])).toEqual([0.1, 0.5, 0.9]);
    const back = deserializePoints(rows);
    expect(isMonotone(back)).toBe(true);
    expect(serializePoints(back)).toEqual(rows);
  });

  it("clamps channels into [0, 1]", () => {
    const rows = serializePoints([{ t: -1, r: 2, g: 0.5, b: -0.1, a: 1.5 }]);
    expect(rows[0]).toEqual([0, 1, 0.5, 0, 1]);
  });

  it("default points span the range", () => {
    const points = defaultPoints();
    expect(points[0].t).toBe(0);
    expect(points[points.length - 1].t).toBe(1);
  });
});

describe("orbit camera", () => {
  const eye: Vec3 = [10, 5, -20];
  const target: Vec3 = [2, 2, 2];

  it("preserves the orbit radius", () => {
    const moved = orbit(eye, target, 0.3, -0.2);
    const r0 = length([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
    const r1 = length([moved[0] - target[0], moved[1] - target[1], moved[2] - target[2]]);
    expect(r1).toBeCloseTo(r0, 10);
  });

  it("full yaw turn returns to the start", () => {
    let position = eye;
    for (let i = 0; i < 8; i++) {
      position = orbit(position, target, Math.PI / 4, 0);
    }
    expect(position[0]).toBeCloseTo(eye[0], 8);
    expect(position[1]).toBeCloseTo(eye[1], 8);
    expect(position[2]).toBeCloseTo(eye[2], 8);
  });

  it("pitch clamps short of the pole", () => {
    const moved = orbit(eye, target, 0, Math.PI);
    const r = length([moved[0] - target[0], moved[1] - target[1], moved[2] - target[2]]);
    expect(Math.abs((moved[1] - target[1]) / r)).toBeLessThan(1);
  });

  it("zoom scales the eye offset", () => {
    const moved = zoom(eye, target, 0.5);
    expect(moved[0] - target[0]).toBeCloseTo((eye[0] - target[0]) * 0.5, 12);
  });
});
