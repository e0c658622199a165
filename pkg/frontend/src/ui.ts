/** Scene editor single-page app.
 *
 * The UI keeps no scene state of its own: every panel rebuild comes from a
 * server summary, every mutating control issues exactly one POST /edit (or
 * /undo, /save), and all controls stay disabled until the server confirms.
 * The viewport image is fetched explicitly so a failed render can keep the
 * last good frame and surface the error in a banner.
 */

import { Api, ApiError, Channel, EditOp, Keyframe, SceneSummary, ThingRow } from "./api.js";
import { applyDelta } from "./rotation.js";

export interface App {
  ready: Promise<void>;
  refreshScene(): Promise<void>;
  refreshRender(): Promise<void>;
}

const VIEW_W = 320;
const VIEW_H = 240;

const SKELETON = `
<fieldset id="controls">
  <div id="left-col">
    <section class="pane" id="object-pane">
      <h2>objects</h2>
      <div id="object-panel"></div>
      <div class="row" style="margin-top:8px">
        <button id="undo-btn">undo</button>
        <button id="save-btn">save</button>
      </div>
    </section>
    <section class="pane" id="pose-pane">
      <h2>pose</h2>
      <label>time <input type="range" id="time-slider" min="0" max="1" step="0.001" value="0"></label>
      <div class="row"><span id="time-readout">0.000</span></div>
      <div class="field-grid" style="margin-top:6px">
        <label for="pose-yaw">yaw deg</label><input type="number" id="pose-yaw" value="0" step="1">
        <label for="pose-pitch">pitch deg</label><input type="number" id="pose-pitch" value="0" step="1">
        <label for="pose-roll">roll deg</label><input type="number" id="pose-roll" value="0" step="1">
        <label for="pose-dx">dx</label><input type="number" id="pose-dx" value="0" step="0.1">
        <label for="pose-dy">dy</label><input type="number" id="pose-dy" value="0" step="0.1">
        <label for="pose-dz">dz</label><input type="number" id="pose-dz" value="0" step="0.1">
      </div>
      <div class="row" style="margin-top:8px"><button id="pose-apply">apply pose</button></div>
    </section>
  </div>
  <section class="pane" id="view-pane">
    <h2>viewport</h2>
    <div id="error-banner" role="alert"></div>
    <div class="row" id="channel-row">
      <label><input type="radio" name="channel" id="channel-color" value="color" checked> color</label>
      <label><input type="radio" name="channel" id="channel-depth" value="depth"> depth</label>
      <label><input type="radio" name="channel" id="channel-semantic" value="semantic"> semantic</label>
      <label><input type="radio" name="channel" id="channel-instance" value="instance"> instance</label>
    </div>
    <div class="row" style="margin:8px 0">
      <label>az <input type="number" id="orbit-az" value="0" step="0.1"></label>
      <label>el <input type="number" id="orbit-el" value="-0.4" step="0.1"></label>
      <label>dist <input type="number" id="orbit-dist" value="1.6" step="0.1"></label>
      <label><input type="checkbox" id="refine-box"> refine</label>
      <button id="view-update">update view</button>
    </div>
    <img id="viewport-img" alt="rendered scene">
    <div id="status-line"></div>
  </section>
</fieldset>
`;

function num(el: HTMLInputElement): number {
  const v = Number(el.value);
  return Number.isFinite(v) ? v : 0;
}

/** Keyframe at or before t; first keyframe when t precedes the track. */
function basePose(thing: ThingRow, t: number): Keyframe {
  let best = thing.keyframes[0];
  for (const kf of thing.keyframes) {
    if (kf.time <= t + 1e-9) best = kf;
    else break;
  }
  return best;
}

export function createApp(root: HTMLElement, api: Api): App {
  root.innerHTML = SKELETON;
  const pick = <T extends HTMLElement>(id: string): T => {
    const el = root.querySelector<T>(`#${id}`);
    if (!el) throw new Error(`missing element #${id}`);
    return el;
  };

  const controls = pick<HTMLFieldSetElement>("controls");
  const panel = pick<HTMLDivElement>("object-panel");
  const banner = pick<HTMLDivElement>("error-banner");
  const statusLine = pick<HTMLDivElement>("status-line");
  const img = pick<HTMLImageElement>("viewport-img");
  const timeSlider = pick<HTMLInputElement>("time-slider");
  const timeReadout = pick<HTMLSpanElement>("time-readout");
  const yawEl = pick<HTMLInputElement>("pose-yaw");
  const pitchEl = pick<HTMLInputElement>("pose-pitch");
  const rollEl = pick<HTMLInputElement>("pose-roll");
  const dxEl = pick<HTMLInputElement>("pose-dx");
  const dyEl = pick<HTMLInputElement>("pose-dy");
  const dzEl = pick<HTMLInputElement>("pose-dz");
  const orbitAz = pick<HTMLInputElement>("orbit-az");
  const orbitEl = pick<HTMLInputElement>("orbit-el");
  const orbitDist = pick<HTMLInputElement>("orbit-dist");
  const refineBox = pick<HTMLInputElement>("refine-box");

  let scene: SceneSummary | null = null;
  let selected: number | null = null;
  let busy = false;
  let renderSeq = 0;
  let currentUrl: string | null = null;

  function setBusy(v: boolean): void {
    busy = v;
    controls.disabled = v;
  }

  function showError(msg: string): void {
    banner.textContent = msg;
    banner.classList.add("visible");
  }

  function hideError(): void {
    banner.textContent = "";
    banner.classList.remove("visible");
  }

  function status(msg: string): void {
    statusLine.textContent = msg;
  }

  function currentChannel(): Channel {
    const checked = root.querySelector<HTMLInputElement>('input[name="channel"]:checked');
    return (checked ? checked.value : "color") as Channel;
  }

  function rebuildPanel(): void {
    panel.textContent = "";
    if (!scene || !scene.things.length) {
      panel.textContent = "(no objects)";
      return;
    }
    for (const t of scene.things) {
      const row = document.createElement("div");
      row.className = "thing-row" + (t.id === selected ? " selected" : "");
      row.dataset.id = String(t.id);
      const meta = document.createElement("div");
      meta.className = "meta";
      const title = document.createElement("div");
      title.textContent = `#${t.id} ${t.category_name}`;
      const sub = document.createElement("div");
      sub.className = "sha";
      sub.textContent = `${t.keyframes.length} keyframes · ${t.field_sha256.slice(0, 8)}`;
      meta.append(title, sub);
      const cloneBtn = document.createElement("button");
      cloneBtn.className = "clone-btn";
      cloneBtn.textContent = "clone";
      cloneBtn.addEventListener("click", (ev) => {
        ev.stopPropagation();
        const dst = scene ? Math.max(...scene.things.map((x) => x.id)) + 1 : t.id + 1;
        void mutate({ op: "clone", src: t.id, dst });
      });
      const removeBtn = document.createElement("button");
      removeBtn.className = "remove-btn";
      removeBtn.textContent = "remove";
      removeBtn.addEventListener("click", (ev) => {
        ev.stopPropagation();
        void mutate({ op: "remove", id: t.id });
      });
      row.addEventListener("click", () => {
        selected = t.id;
        rebuildPanel();
      });
      row.append(meta, cloneBtn, removeBtn);
      panel.append(row);
    }
  }

  function resetPoseInputs(): void {
    for (const el of [yawEl, pitchEl, rollEl, dxEl, dyEl, dzEl]) el.value = "0";
  }

  function applyScene(s: SceneSummary): void {
    scene = s;
    if (selected === null || !s.things.some((t) => t.id === selected)) {
      selected = s.things.length ? s.things[0].id : null;
    }
    rebuildPanel();
    resetPoseInputs();
    status(`${s.things.length} objects · log ${s.log_length} · scene ${s.hash.slice(0, 12)}`);
  }

  function flagStale(id: number): void {
    const row = panel.querySelector<HTMLDivElement>(`.thing-row[data-id="${id}"]`);
    if (!row || row.classList.contains("stale")) return;
    row.classList.add("stale");
    const badge = document.createElement("span");
    badge.className = "stale-badge";
    badge.textContent = "stale";
    row.append(badge);
  }

  async function refreshRender(): Promise<void> {
    const seq = ++renderSeq;
    try {
      const url = await api.fetchRender({
        cam: `${num(orbitAz)},${num(orbitEl)},${num(orbitDist)}`,
        time: num(timeSlider),
        w: VIEW_W,
        h: VIEW_H,
        channel: currentChannel(),
        refine: refineBox.checked || undefined,
        v: scene ? scene.hash : undefined,
      });
      if (seq !== renderSeq) {
        URL.revokeObjectURL(url);
        return;
      }
      const old = currentUrl;
      img.src = url;
      currentUrl = url;
      if (old) URL.revokeObjectURL(old);
      hideError();
    } catch (e) {
      if (seq !== renderSeq) return;
      showError(e instanceof Error ? e.message : String(e));
    }
  }

  async function refreshScene(): Promise<void> {
    applyScene(await api.scene());
  }

  /** One mutating request; controls stay locked until the server answers. */
  async function mutate(op: EditOp): Promise<void> {
    if (busy) return;
    setBusy(true);
    try {
      const res = await api.edit(op);
      hideError();
      applyScene(res.scene);
      await refreshRender();
    } catch (e) {
      if (e instanceof ApiError && e.status === 404) {
        const id = typeof op.id === "number" ? op.id : typeof op.src === "number" ? op.src : null;
        if (id !== null) flagStale(id);
        await refreshScene();
        await refreshRender();
      } else {
        showError(e instanceof Error ? e.message : String(e));
      }
    } finally {
      setBusy(false);
    }
  }

  async function doUndo(): Promise<void> {
    if (busy) return;
    setBusy(true);
    try {
      applyScene(await api.undo());
      hideError();
      await refreshRender();
    } catch (e) {
      showError(e instanceof Error ? e.message : String(e));
    } finally {
      setBusy(false);
    }
  }

  async function doSave(): Promise<void> {
    if (busy) return;
    setBusy(true);
    try {
      const res = await api.save();
      status(`saved to ${res.path}`);
    } catch (e) {
      showError(e instanceof Error ? e.message : String(e));
    } finally {
      setBusy(false);
    }
  }

  function onApplyPose(): void {
    if (!scene || selected === null) {
      status("no object selected");
      return;
    }
    const thing = scene.things.find((t) => t.id === selected);
    if (!thing) return;
    const yaw = num(yawEl);
    const pitch = num(pitchEl);
    const roll = num(rollEl);
    const dx = num(dxEl);
    const dy = num(dyEl);
    const dz = num(dzEl);
    if (yaw === 0 && pitch === 0 && roll === 0 && dx === 0 && dy === 0 && dz === 0) {
      status("no pose changes");
      return;
    }
    const t = num(timeSlider);
    const base = basePose(thing, t);
    const rotation = applyDelta(base.rotation, yaw, pitch, roll);
    const translation = [
      base.translation[0] + dx,
      base.translation[1] + dy,
      base.translation[2] + dz,
    ];
    void mutate({ op: "set-pose", id: selected, time: t, rotation, translation });
  }

  pick<HTMLButtonElement>("undo-btn").addEventListener("click", () => void doUndo());
  pick<HTMLButtonElement>("save-btn").addEventListener("click", () => void doSave());
  pick<HTMLButtonElement>("pose-apply").addEventListener("click", onApplyPose);
  pick<HTMLButtonElement>("view-update").addEventListener("click", () => void refreshRender());
  timeSlider.addEventListener("input", () => {
    timeReadout.textContent = num(timeSlider).toFixed(3);
  });
  timeSlider.addEventListener("change", () => void refreshRender());
  refineBox.addEventListener("change", () => void refreshRender());
  for (const radio of root.querySelectorAll<HTMLInputElement>('input[name="channel"]')) {
    radio.addEventListener("change", () => void refreshRender());
  }

  const ready = (async () => {
    try {
      await refreshScene();
      await refreshRender();
    } catch (e) {
      showError(e instanceof Error ? e.message : String(e));
    }
  })();

  return { ready, refreshScene, refreshRender };
}
