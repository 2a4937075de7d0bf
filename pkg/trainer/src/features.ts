/**
 * The frozen 12-feature layout shared with the simulator's planner:
 *   [0, 0, v_local_x, v_local_y, a_local_x, a_local_y, sin(0), cos(0),
 *    goal_local_x, goal_local_y, horizon_seconds, terminal_speed]
 * All quantities expressed in the frame of the current pose.
 */
export const FEATURE_SIZE = 12;
export const FEATURE_VERSION = 1;

export interface PlanContext {
  position: [number, number];
  velocity: [number, number];
  acceleration: [number, number];
  heading: number;
  goal: [number, number];
  horizonSeconds: number;
  terminalSpeed: number;
}

export function toLocal(v: [number, number], heading: number): [number, number] {
  const c = Math.cos(heading);
  const s = Math.sin(heading);
  return [c * v[0] + s * v[1], -s * v[0] + c * v[1]];
}

export function features(ctx: PlanContext): number[] {
  const vLocal = toLocal(ctx.velocity, ctx.heading);
  const aLocal = toLocal(ctx.acceleration, ctx.heading);
  const goalLocal = toLocal(
    [ctx.goal[0] - ctx.position[0], ctx.goal[1] - ctx.position[1]],
    ctx.heading,
  );
  return [
    0, 0,
    vLocal[0], vLocal[1],
    aLocal[0], aLocal[1],
    0, 1,
    goalLocal[0], goalLocal[1],
    ctx.horizonSeconds,
    ctx.terminalSpeed,
  ];
}
