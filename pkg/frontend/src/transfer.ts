/**
 * Transfer-function control points for the editor widget.
 *
 * Points are (t, r, g, b, a) with t in [0, 1].  The editor may reorder
 * handles while dragging; serialization always emits points sorted and
 * clamped, so the protocol form is monotone in t and survives a round trip
 * without loss.
 */

export interface ControlPoint {
  t: number;
  r: number;
  g: number;
  b: number;
  a: number;
}

const clamp01 = (v: number) => Math.min(1, Math.max(0, v));

export function normalizePoints(points: ControlPoint[]): ControlPoint[] {
  const cleaned = points.map((p) => ({
    t: clamp01(p.t),
    r: clamp01(p.r),
    g: clamp01(p.g),
    b: clamp01(p.b),
    a: clamp01(p.a),
  }));
  cleaned.sort((x, y) => x.t - y.t);
  return cleaned;
}

export function isMonotone(points: ControlPoint[]): boolean {
  for (let i = 1; i < points.length; i++) {
    if (points[i].t < points[i - 1].t) {
      return false;
    }
  }
  return true;
}

/** Protocol form: array of [t, r, g, b, a] rows. */
export function serializePoints(points: ControlPoint[]): number[][] {
  return normalizePoints(points).map((p) => [p.t, p.r, p.g, p.b, p.a]);
}

export function deserializePoints(rows: number[][]): ControlPoint[] {
  return rows.map((row) => ({
    t: row[0], r: row[1], g: row[2], b: row[3], a: row[4],
  }));
}

export const defaultPoints = (): ControlPoint[] => [
  { t: 0, r: 0, g: 0, b: 0, a: 0 },
  { t: 1, r: 1, g: 1, b: 1, a: 1 },
];
