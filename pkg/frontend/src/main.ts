import { ServiceClient } from "./api";
import {
  EditorState,
  PRESETS,
  SHIFT_MAX,
  SHIFT_MIN,
  SHIFT_STEP,
  cloneObject,
  createState,
  dragObject,
  exportScenario,
  removeObject,
  renderRequest,
  restoreObject,
  setFrame,
  setLateralShift,
  visibleObjects,
} from "./state";
import { RenderQueue } from "./renderQueue";
import { ViewMode } from "./types";

const client = new ServiceClient("");
let state: EditorState | null = null;
let lastBlobUrl: string | null = null;

const el = (id: string) => document.getElementById(id) as HTMLElement;

const queue = new RenderQueue(
  (req) => client.render(req),
  (blob) => {
    const url = URL.createObjectURL(blob);
    (el("simulated") as HTMLImageElement).src = url;
    if (lastBlobUrl !== null) {
      URL.revokeObjectURL(lastBlobUrl);
    }
    lastBlobUrl = url;
  },
  (err) => showBanner(`render failed: ${String(err)}`),
);

function showBanner(message: string): void {
  const banner = el("banner");
  banner.textContent = message;
  banner.classList.remove("hidden");
}

function hideBanner(): void {
  el("banner").classList.add("hidden");
}

function refresh(): void {
  if (state === null) {
    return;
  }
  (el("gt") as HTMLImageElement).src = client.gtUrl(state.frame);
  queue.submit(renderRequest(state));
  renderObjectList();
  const mode = state.viewMode;
  el("gt-pane").classList.toggle("hidden", mode === "simulated");
  el("sim-pane").classList.toggle("hidden", mode === "ground-truth");
}

function renderObjectList(): void {
  if (state === null) {
    return;
  }
  const s = state;
  const list = el("objects");
  list.innerHTML = "";
  for (const id of s.scene.objects) {
    const row = document.createElement("li");
    const removed = s.removed.has(id);
    row.textContent = `object ${id}${removed ? " (removed)" : ""} `;

    const toggle = document.createElement("button");
    toggle.textContent = removed ? "restore" : "remove";
    toggle.onclick = () => {
      removed ? restoreObject(s, id) : removeObject(s, id);
      refresh();
    };
    row.appendChild(toggle);

    if (!removed) {
      const clone = document.createElement("button");
      clone.textContent = "clone +3m";
      clone.onclick = () => {
        cloneObject(s, id, [0, 3, 0]);
        refresh();
      };
      row.appendChild(clone);

      for (const [label, dx, dy] of [
        ["x+1", 1, 0],
        ["x-1", -1, 0],
        ["y+1", 0, 1],
        ["y-1", 0, -1],
      ] as [string, number, number][]) {
        const nudge = document.createElement("button");
        nudge.textContent = label;
        nudge.onclick = () => {
          const prior = s.objectOffsets.get(id);
          dragObject(
            s,
            id,
            (prior?.offset[0] ?? 0) + dx,
            (prior?.offset[1] ?? 0) + dy,
          );
          refresh();
        };
        row.appendChild(nudge);
      }
    }
    list.appendChild(row);
  }
  const extra = visibleObjects(s).filter((id) => !s.scene.objects.includes(id));
  for (const id of extra) {
    const row = document.createElement("li");
    row.textContent = `object ${id} (clone) `;
    const drop = document.createElement("button");
    drop.textContent = "remove";
    drop.onclick = () => {
      removeObject(s, id);
      refresh();
    };
    row.appendChild(drop);
    list.appendChild(row);
  }
}

async function connect(): Promise<void> {
  try {
    const meta = await client.scene();
    state = createState(meta);
    hideBanner();
  } catch (err) {
    showBanner(`cannot reach service: ${String(err)}`);
    return;
  }
  const timeline = el("timeline") as HTMLInputElement;
  const indices = state.scene.frames.map((f) => f.index);
  timeline.min = String(Math.min(...indices));
  timeline.max = String(Math.max(...indices));
  timeline.value = String(state.frame);
  refresh();
}

function wire(): void {
  const slider = el("shift") as HTMLInputElement;
  slider.min = String(SHIFT_MIN);
  slider.max = String(SHIFT_MAX);
  slider.step = String(SHIFT_STEP);
  slider.oninput = () => {
    if (state) {
      setLateralShift(state, Number(slider.value));
      el("shift-value").textContent = `${state.lateralShift.toFixed(1)} m`;
      refresh();
    }
  };

  (el("timeline") as HTMLInputElement).oninput = (ev) => {
    if (state) {
      setFrame(state, Number((ev.target as HTMLInputElement).value));
      el("frame-value").textContent = `frame ${state.frame}`;
      refresh();
    }
  };

  (el("view-mode") as HTMLSelectElement).onchange = (ev) => {
    if (state) {
      state.viewMode = (ev.target as HTMLSelectElement).value as ViewMode;
      refresh();
    }
  };

  (el("preset") as HTMLSelectElement).onchange = (ev) => {
    if (state) {
      const name = (ev.target as HTMLSelectElement).value;
      state.preset = PRESETS.find((p) => p.name === name) ?? PRESETS[0];
      refresh();
    }
  };

  el("export").onclick = () => {
    if (!state) {
      return;
    }
    const blob = new Blob([exportScenario(state)], {
      type: "application/json",
    });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = "edits.json";
    a.click();
    URL.revokeObjectURL(a.href);
  };

  el("retry").onclick = () => void connect();
}

wire();
void connect();
