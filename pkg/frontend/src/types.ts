// Scenario edit JSON mirrors the service schema exactly; the UI never
// invents kinds the service lacks.

export interface EgoLateralShift {
  kind: "ego_lateral_shift";
  meters: number;
}

export interface EgoPoseOverride {
  kind: "ego_pose_override";
  frame: number;
  cam_to_world: number[][];
}

export interface ObjectOffset {
  kind: "object_offset";
  object_id: number;
  offset: [number, number, number];
  yaw: number;
}

export interface ObjectRemove {
  kind: "object_remove";
  object_id: number;
}

export interface ObjectClone {
  kind: "object_clone";
  object_id: number;
  new_id: number;
  offset: [number, number, number];
}

export interface TimeOverride {
  kind: "time_override";
  frame: number;
}

export type ScenarioEdit =
  | EgoLateralShift
  | EgoPoseOverride
  | ObjectOffset
  | ObjectRemove
  | ObjectClone
  | TimeOverride;

export interface FrameMeta {
  index: number;
  split: string;
  timestamp: number;
}

export interface SceneMeta {
  width: number;
  height: number;
  frames: FrameMeta[];
  objects: number[];
  bounds_min: number[];
  bounds_max: number[];
}

export interface RenderRequest {
  frame_index: number;
  edits: ScenarioEdit[];
  width?: number;
  height?: number;
}

export type ViewMode = "simulated" | "ground-truth" | "side-by-side";

export function parseSceneMeta(raw: unknown): SceneMeta {
  const m = raw as Partial<SceneMeta>;
  if (
    typeof m !== "object" ||
    m === null ||
    typeof m.width !== "number" ||
    typeof m.height !== "number" ||
    !Array.isArray(m.frames) ||
    !Array.isArray(m.objects) ||
    m.frames.some((f) => typeof f.index !== "number")
  ) {
    throw new Error("scene metadata does not match the expected schema");
  }
  return m as SceneMeta;
}
