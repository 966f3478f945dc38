/**
 * Orbit camera model: a pure reducer over drag/scroll input plus the exact
 * derivation of the renderer's camera JSON (same convention and byte-level
 * float formatting as the backend, validated against a golden fixture).
 */

export interface OrbitState {
  target: [number, number, number];
  radius: number;
  azimuth: number; // radians, free-running
  elevation: number; // radians, clamped near +-pi/2
  fovDeg: number;
  width: number;
  height: number;
}

export interface OrbitInput {
  dragX?: number; // pixels
  dragY?: number;
  scroll?: number; // wheel notches, positive = zoom out
}

export const DRAG_GAIN = 0.005; // radians per pixel
export const SCROLL_GAIN = 1.1; // radius multiplier per notch
export const ELEVATION_LIMIT = Math.PI / 2 - 1e-3;
export const RADIUS_MIN = 0.2;
export const RADIUS_MAX = 100;

export function orbitUpdate(state: OrbitState, input: OrbitInput): OrbitState {
  const azimuth = state.azimuth + (input.dragX ?? 0) * DRAG_GAIN;
  const elevation = clamp(
    state.elevation + (input.dragY ?? 0) * DRAG_GAIN,
    -ELEVATION_LIMIT,
    ELEVATION_LIMIT,
  );
  const radius = clamp(
    state.radius * Math.pow(SCROLL_GAIN, input.scroll ?? 0),
    RADIUS_MIN,
    RADIUS_MAX,
  );
  return { ...state, azimuth, elevation, radius };
}

function clamp(x: number, lo: number, hi: number): number {
  return Math.min(Math.max(x, lo), hi);
}

export interface CameraJson {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
  rotation: number[];
  translation: number[];
}

type Vec3 = [number, number, number];

const sub = (a: Vec3, b: Vec3): Vec3 => [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
const cross = (a: Vec3, b: Vec3): Vec3 => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];
const dot = (a: Vec3, b: Vec3) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
const norm = (a: Vec3) => Math.sqrt(dot(a, a));
const normalize = (a: Vec3): Vec3 => {
  const n = norm(a);
  return [a[0] / n, a[1] / n, a[2] / n];
};

/** Camera position on the orbit sphere (z-up world). */
export function orbitPosition(state: OrbitState): Vec3 {
  const ce = Math.cos(state.elevation);
  return [
    state.target[0] + state.radius * ce * Math.cos(state.azimuth),
    state.target[1] + state.radius * ce * Math.sin(state.azimuth),
    state.target[2] + state.radius * Math.sin(state.elevation),
  ];
}

/**
 * Derive the renderer camera: right-handed, camera looks down +z, world to
 * camera stored as (R, t) with q = R p + t. Mirrors the backend's look-at
 * construction exactly.
 */
export function deriveCamera(state: OrbitState): CameraJson {
  const position = orbitPosition(state);
  const forward = normalize(sub(state.target, position));
  let up: Vec3 = [0, 0, 1];
  if (Math.abs(dot(forward, up)) > 0.999) {
    up = [0, 1, 0];
  }
  const right = normalize(cross(forward, up));
  const down = cross(forward, right);
  const R = [...right, ...down, ...forward];
  // translation is (-R) @ position, negating R entries before the dot
  // products; this keeps IEEE signed-zero propagation identical to the
  // backend so canonical poses serialize byte-equal
  const t: Vec3 = [
    -R[0] * position[0] + -R[1] * position[1] + -R[2] * position[2],
    -R[3] * position[0] + -R[4] * position[1] + -R[5] * position[2],
    -R[6] * position[0] + -R[7] * position[1] + -R[8] * position[2],
  ];
  const fx = state.width / 2 / Math.tan((state.fovDeg * Math.PI) / 180 / 2);
  return {
    fx,
    fy: fx,
    cx: (state.width - 1) / 2,
    cy: (state.height - 1) / 2,
    width: state.width,
    height: state.height,
    rotation: R,
    translation: t,
  };
}

/**
 * Format a float64 the way the backend's JSON writer does (shortest
 * round-trip decimal, trailing ".0" on integral values, two-digit
 * exponents). Needed for byte-exact pose fixtures.
 */
export function pyFloat(x: number): string {
  if (!Number.isFinite(x)) throw new Error(`non-finite float: ${x}`);
  if (Object.is(x, -0)) return "-0.0";
  const mag = Math.abs(x);
  if (x !== 0 && (mag < 1e-4 || mag >= 1e16)) {
    return x.toExponential().replace(/e([+-])(\d)$/, "e$10$2");
  }
  const s = String(x);
  return s.includes(".") || s.includes("e") ? s : s + ".0";
}

/** Serialize the derived camera byte-identically to the backend schema. */
export function poseSerialize(state: OrbitState): string {
  const cam = deriveCamera(state);
  const floats = (xs: number[]) => xs.map(pyFloat).join(", ");
  return (
    `{"fx": ${pyFloat(cam.fx)}, "fy": ${pyFloat(cam.fy)}, ` +
    `"cx": ${pyFloat(cam.cx)}, "cy": ${pyFloat(cam.cy)}, ` +
    `"width": ${cam.width}, "height": ${cam.height}, ` +
    `"rotation": [${floats(cam.rotation)}], ` +
    `"translation": [${floats(cam.translation)}]}`
  );
}

/** Orthonormality defect of the derived rotation (max |R^T R - I|). */
export function rotationDefect(cam: CameraJson): number {
  const R = cam.rotation;
  let worst = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let acc = 0;
      for (let k = 0; k < 3; k++) acc += R[k * 3 + i] * R[k * 3 + j];
      worst = Math.max(worst, Math.abs(acc - (i === j ? 1 : 0)));
    }
  }
  return worst;
}
