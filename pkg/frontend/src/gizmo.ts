/**
 * Placement gizmo for next-best-view capture.
 *
 * The default ("constrained") mode exposes exactly the two handles an
 * operator reasons in: a look-at point on the facade plane and a
 * standoff distance along the facade normal. The camera position is
 * derived, so every pose the gizmo can produce fronts the facade.
 * An "advanced" mode accepts a free 6-dof pose (explicit quaternion +
 * translation) for expert use.
 */

export type Vec3 = readonly [number, number, number];

export interface ConstrainedGizmo {
  readonly mode: "constrained";
  /** Point on the facade the camera should center. */
  readonly lookAt: Vec3;
  /** Distance from the facade plane along its outward normal, metres. */
  readonly standoff: number;
  /** Outward facade normal (unit). */
  readonly normal: Vec3;
  /** Lateral/vertical offset of the camera in the standoff plane. */
  readonly offset: readonly [number, number];
}

export interface FreeGizmo {
  readonly mode: "free";
  readonly q: readonly [number, number, number, number];
  readonly t: Vec3;
}

export type GizmoState = ConstrainedGizmo | FreeGizmo;

export function defaultGizmo(): GizmoState {
  return {
    mode: "constrained",
    lookAt: [0, 0, 1],
    standoff: 3,
    normal: [0, 1, 0],
    offset: [0, 0],
  };
}

function normalize(v: Vec3): Vec3 {
  const n = Math.hypot(v[0], v[1], v[2]);
  if (!(n > 0)) throw new RangeError("facade normal must be non-zero");
  return [v[0] / n, v[1] / n, v[2] / n];
}

/** In-plane basis (right, up) completing the facade normal. */
function planeBasis(normal: Vec3): [Vec3, Vec3] {
  const worldUp: Vec3 = Math.abs(normal[2]) < 0.9 ? [0, 0, 1] : [1, 0, 0];
  const right: Vec3 = normalize([
    worldUp[1] * normal[2] - worldUp[2] * normal[1],
    worldUp[2] * normal[0] - worldUp[0] * normal[2],
    worldUp[0] * normal[1] - worldUp[1] * normal[0],
  ]);
  const up: Vec3 = [
    normal[1] * right[2] - normal[2] * right[1],
    normal[2] * right[0] - normal[0] * right[2],
    normal[0] * right[1] - normal[1] * right[0],
  ];
  return [right, up];
}

export function cameraPosition(g: ConstrainedGizmo): Vec3 {
  const n = normalize(g.normal);
  const [right, up] = planeBasis(n);
  return [
    g.lookAt[0] + g.standoff * n[0] + g.offset[0] * right[0] + g.offset[1] * up[0],
    g.lookAt[1] + g.standoff * n[1] + g.offset[0] * right[1] + g.offset[1] * up[1],
    g.lookAt[2] + g.standoff * n[2] + g.offset[0] * right[2] + g.offset[1] * up[2],
  ];
}

export interface PoseSpec {
  position?: number[];
  look_at?: number[];
  q?: number[];
  t?: number[];
}

/** Serialize the gizmo into the capture-request pose block. */
export function toPoseSpec(g: GizmoState): PoseSpec {
  if (g.mode === "free") {
    return { q: [...g.q], t: [...g.t] };
  }
  if (!(g.standoff > 0)) throw new RangeError("standoff must be positive");
  return { position: [...cameraPosition(g)], look_at: [...g.lookAt] };
}
