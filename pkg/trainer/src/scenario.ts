import * as fs from "node:fs";
import * as path from "node:path";

export interface AgentTrajectory {
  startTime: number;
  states: number[][]; // [x, y, heading]
}

export interface Agent {
  id: string;
  role: string;
  length: number;
  width: number;
  trajectory: AgentTrajectory;
}

export interface Scenario {
  dt: number;
  historyHorizon: number;
  futureHorizon: number;
  agents: Agent[];
}

export function loadScenario(file: string): Scenario {
  const doc = JSON.parse(fs.readFileSync(file, "utf-8"));
  return {
    dt: doc.dt,
    historyHorizon: doc.history_horizon,
    futureHorizon: doc.future_horizon,
    agents: doc.agents.map((a: any) => ({
      id: a.id,
      role: a.role,
      length: a.length,
      width: a.width,
      trajectory: { startTime: a.trajectory.start_time, states: a.trajectory.states },
    })),
  };
}

export function scenarioFiles(dir: string): string[] {
  return fs
    .readdirSync(dir)
    .filter((f) => f.endsWith(".json") && f !== "manifest.json")
    .sort()
    .map((f) => path.join(dir, f));
}
