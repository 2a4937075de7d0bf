import { FEATURE_SIZE, PlanContext, features, toLocal } from "./features.js";
import { Scenario, loadScenario, scenarioFiles } from "./scenario.js";

export interface Example {
  features: number[];           // FEATURE_SIZE
  target: number[];             // 2 * horizonSteps local offsets
}

/**
 * One example per agent per valid window. The goal feature is the true
 * endpoint (teacher forcing), so the final target offset equals the local
 * goal exactly.
 */
export function windowsFromScenario(scenario: Scenario, horizonSteps: number): Example[] {
  const out: Example[] = [];
  const dt = scenario.dt;
  for (const agent of scenario.agents) {
    const states = agent.trajectory.states;
    for (let t0 = 2; t0 + horizonSteps < states.length; t0++) {
      const p = states[t0];
      const pPrev = states[t0 - 1];
      const pPrev2 = states[t0 - 2];
      const heading = p[2];
      const velocity: [number, number] = [(p[0] - pPrev[0]) / dt, (p[1] - pPrev[1]) / dt];
      const accel: [number, number] = [
        (p[0] - 2 * pPrev[0] + pPrev2[0]) / (dt * dt),
        (p[1] - 2 * pPrev[1] + pPrev2[1]) / (dt * dt),
      ];
      const goalIdx = t0 + horizonSteps;
      const end = states[goalIdx];
      const endPrev = states[goalIdx - 1];
      const terminalSpeed = Math.hypot((end[0] - endPrev[0]) / dt, (end[1] - endPrev[1]) / dt);
      const ctx: PlanContext = {
        position: [p[0], p[1]],
        velocity,
        acceleration: accel,
        heading,
        goal: [end[0], end[1]],
        horizonSeconds: horizonSteps * dt,
        terminalSpeed,
      };
      const target: number[] = [];
      for (let k = 1; k <= horizonSteps; k++) {
        const q = states[t0 + k];
        const local = toLocal([q[0] - p[0], q[1] - p[1]], heading);
        target.push(local[0], local[1]);
      }
      out.push({ features: features(ctx), target });
    }
  }
  return out;
}

export function buildDataset(dir: string, horizonSteps: number): Example[] {
  const files = scenarioFiles(dir);
  if (files.length === 0) {
    throw new Error(`no scenario files in ${dir}`);
  }
  const out: Example[] = [];
  for (const file of files) {
    out.push(...windowsFromScenario(loadScenario(file), horizonSteps));
  }
  if (out.length === 0) {
    throw new Error("no training windows (trajectories shorter than the horizon?)");
  }
  return out;
}
