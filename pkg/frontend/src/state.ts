import { RenderRequest, ScenarioEdit, SceneMeta, ViewMode } from "./types";

export const SHIFT_MIN = -3;
export const SHIFT_MAX = 3;
export const SHIFT_STEP = 0.5;

export interface ResolutionPreset {
  name: string;
  width: number | null; // null renders at full scene resolution
}

export const PRESETS: ResolutionPreset[] = [
  { name: "preview", width: 320 },
  { name: "full", width: null },
];

export interface EditorState {
  scene: SceneMeta;
  frame: number;
  lateralShift: number;
  objectOffsets: Map<number, { offset: [number, number, number]; yaw: number }>;
  removed: Set<number>;
  clones: Map<number, { source: number; offset: [number, number, number] }>;
  viewMode: ViewMode;
  preset: ResolutionPreset;
}

export function createState(scene: SceneMeta): EditorState {
  return {
    scene,
    frame: scene.frames.length ? scene.frames[0].index : 0,
    lateralShift: 0,
    objectOffsets: new Map(),
    removed: new Set(),
    clones: new Map(),
    viewMode: "side-by-side",
    preset: PRESETS[0],
  };
}

export function clampShift(meters: number): number {
  const snapped = Math.round(meters / SHIFT_STEP) * SHIFT_STEP;
  return Math.min(SHIFT_MAX, Math.max(SHIFT_MIN, snapped));
}

export function setLateralShift(state: EditorState, meters: number): void {
  state.lateralShift = clampShift(meters);
}

export function setFrame(state: EditorState, frame: number): void {
  const indices = state.scene.frames.map((f) => f.index);
  if (!indices.includes(frame)) {
    throw new Error(`frame ${frame} not in scene (${indices.join(", ")})`);
  }
  state.frame = frame;
}

function knownObject(state: EditorState, objectId: number): void {
  if (!state.scene.objects.includes(objectId) && !state.clones.has(objectId)) {
    throw new Error(`unknown object ${objectId}`);
  }
}

export function dragObject(
  state: EditorState,
  objectId: number,
  dx: number,
  dy: number,
  yaw = 0,
): void {
  knownObject(state, objectId);
  state.objectOffsets.set(objectId, { offset: [dx, dy, 0], yaw });
}

export function removeObject(state: EditorState, objectId: number): void {
  knownObject(state, objectId);
  if (state.clones.has(objectId)) {
    state.clones.delete(objectId);
    state.objectOffsets.delete(objectId);
    return;
  }
  state.removed.add(objectId);
  state.objectOffsets.delete(objectId);
}

export function restoreObject(state: EditorState, objectId: number): void {
  state.removed.delete(objectId);
}

export function cloneObject(
  state: EditorState,
  objectId: number,
  offset: [number, number, number],
): number {
  knownObject(state, objectId);
  const used = [...state.scene.objects, ...state.clones.keys()];
  const newId = Math.max(...used) + 1;
  state.clones.set(newId, { source: objectId, offset });
  return newId;
}

export function visibleObjects(state: EditorState): number[] {
  const base = state.scene.objects.filter((id) => !state.removed.has(id));
  return [...base, ...state.clones.keys()].sort((a, b) => a - b);
}

export function pendingEdits(state: EditorState): ScenarioEdit[] {
  const edits: ScenarioEdit[] = [];
  if (state.lateralShift !== 0) {
    edits.push({ kind: "ego_lateral_shift", meters: state.lateralShift });
  }
  for (const id of [...state.removed].sort((a, b) => a - b)) {
    edits.push({ kind: "object_remove", object_id: id });
  }
  for (const [newId, clone] of [...state.clones].sort((a, b) => a[0] - b[0])) {
    edits.push({
      kind: "object_clone",
      object_id: clone.source,
      new_id: newId,
      offset: clone.offset,
    });
  }
  for (const [id, o] of [...state.objectOffsets].sort((a, b) => a[0] - b[0])) {
    edits.push({
      kind: "object_offset",
      object_id: id,
      offset: o.offset,
      yaw: o.yaw,
    });
  }
  return edits;
}

export function renderRequest(state: EditorState): RenderRequest {
  const req: RenderRequest = {
    frame_index: state.frame,
    edits: pendingEdits(state),
  };
  if (state.preset.width !== null && state.preset.width < state.scene.width) {
    req.width = state.preset.width;
  }
  return req;
}

// Serialized form runnable by the CLI's simulate --edits flag.
export function exportScenario(state: EditorState): string {
  return JSON.stringify({ edits: pendingEdits(state) }, null, 1);
}
