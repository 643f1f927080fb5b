/**
 * Orbit-camera math for mouse drags: rotate the eye around the look-at
 * point, keeping the distance fixed and the pitch clamped away from the
 * poles so the up vector stays usable.
 */

export type Vec3 = [number, number, number];

const sub = (a: Vec3, b: Vec3): Vec3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
const add = (a: Vec3, b: Vec3): Vec3 => [a[0] + b[0], a[1] + b[1], a[2] + b[2]];

export function length(v: Vec3): number {
  return Math.hypot(v[0], v[1], v[2]);
}

/**
 * New eye position after yawing around the world Y axis and pitching
 * against it.  Angles in radians; positive yaw orbits right.
 */
export function orbit(position: Vec3, lookAt: Vec3, dYaw: number, dPitch: number): Vec3 {
  const offset = sub(position, lookAt);
  const radius = length(offset);
  if (radius === 0) {
    return position;
  }
  let yaw = Math.atan2(offset[0], offset[2]);
  let pitch = Math.asin(Math.min(1, Math.max(-1, offset[1] / radius)));
  yaw += dYaw;
  const limit = Math.PI / 2 - 0.05;
  pitch = Math.min(limit, Math.max(-limit, pitch + dPitch));
  const cosP = Math.cos(pitch);
  const rotated: Vec3 = [
    radius * cosP * Math.sin(yaw),
    radius * Math.sin(pitch),
    radius * cosP * Math.cos(yaw),
  ];
  return add(lookAt, rotated);
}

export function zoom(position: Vec3, lookAt: Vec3, factor: number): Vec3 {
  const offset = sub(position, lookAt);
  return add(lookAt, [offset[0] * factor, offset[1] * factor, offset[2] * factor]);
}
