/**
 * Browser entry point: wires the store, event stream, viewer, overlay
 * legend, placement gizmo controls, and the capture/retry banners.
 */
import * as THREE from "three";
import { Store, OverlayMode } from "./store.js";
import { EventStream } from "./events.js";
import { ApiClient, fetchSnapshot, placeAndCapture } from "./capture.js";
import { buildMesh } from "./viewer.js";
import { gsdLegend, redundancyLegend, LegendEntry } from "./colors.js";
import { integrationPayloadSchema } from "./protocol.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function startApp(baseUrl: string, sessionId: string): void {
  const store = new Store();
  const api: ApiClient = { baseUrl, sessionId };

  // --- three.js scene -----------------------------------------------------
  const canvas = el<HTMLCanvasElement>("viewport");
  const renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
  const scene = new THREE.Scene();
  scene.background = new THREE.Color(0x10141a);
  scene.add(new THREE.AmbientLight(0xffffff, 0.55));
  const sun = new THREE.DirectionalLight(0xffffff, 1.2);
  sun.position.set(2, 6, 4);
  scene.add(sun);
  const camera = new THREE.PerspectiveCamera(50, 1, 0.01, 500);
  camera.position.set(0, 6, 2);
  camera.lookAt(0, 0, 1);

  let mesh: THREE.Mesh | null = null;

  function resize(): void {
    const w = canvas.clientWidth || 800;
    const h = canvas.clientHeight || 600;
    renderer.setSize(w, h, false);
    camera.aspect = w / h;
    camera.updateProjectionMatrix();
  }
  window.addEventListener("resize", resize);
  resize();

  renderer.setAnimationLoop(() => renderer.render(scene, camera));

  // --- store-driven DOM ---------------------------------------------------
  const banner = el<HTMLDivElement>("banner");
  const retry = el<HTMLDivElement>("retry-prompt");
  const legend = el<HTMLUListElement>("legend");
  const feed = el<HTMLUListElement>("event-feed");

  function renderLegend(entries: LegendEntry[]): void {
    legend.replaceChildren(
      ...entries.map((entry) => {
        const li = document.createElement("li");
        const chip = document.createElement("span");
        chip.className = "chip";
        chip.style.background = `rgb(${entry.color.join(",")})`;
        li.append(chip, ` ${entry.label}`);
        return li;
      }),
    );
  }

  store.subscribe((state) => {
    // mesh swap on new immutable snapshot
    if (state.snapshot && (!mesh || mesh.userData.seq !== state.snapshot.seq)) {
      if (mesh) {
        scene.remove(mesh);
        mesh.geometry.dispose();
      }
      mesh = buildMesh(state.snapshot);
      mesh.userData.seq = state.snapshot.seq;
      scene.add(mesh);

      const ov = state.snapshot.overlay;
      if (ov?.kind === "gsd" && ov.scale) {
        renderLegend(gsdLegend(state.snapshot.tables, ov.scale.lo, ov.scale.hi));
      } else if (ov?.kind === "redundancy") {
        renderLegend(redundancyLegend(state.snapshot.tables));
      } else {
        legend.replaceChildren();
      }
    }

    banner.hidden = !(state.schemaError || state.connection === "reconnecting");
    banner.textContent =
      state.schemaError ??
      (state.connection === "reconnecting" ? "Connection lost — reconnecting…" : "");

    retry.hidden = !state.retryPrompt;
    retry.textContent = state.retryPrompt?.message ?? "";

    feed.replaceChildren(
      ...state.events.slice(-30).map((event) => {
        const li = document.createElement("li");
        const p = integrationPayloadSchema.safeParse(event.payload);
        li.textContent = p.success
          ? `#${event.seq} image ${p.data.image_id}: ${p.data.status} ` +
            `(${p.data.inlier_count} inliers, +${p.data.new_point_count} pts)`
          : `#${event.seq} ${event.kind}`;
        return li;
      }),
    );
  });

  // --- controls -----------------------------------------------------------
  el<HTMLSelectElement>("overlay-mode").addEventListener("change", (ev) => {
    store.setOverlayMode((ev.target as HTMLSelectElement).value as OverlayMode);
    void fetchSnapshot(api, store);
  });

  const standoff = el<HTMLInputElement>("standoff");
  const lookX = el<HTMLInputElement>("look-x");
  const lookZ = el<HTMLInputElement>("look-z");
  function syncGizmo(): void {
    const g = store.getState().gizmo;
    if (g.mode !== "constrained") return;
    store.setGizmo({
      ...g,
      standoff: Number(standoff.value) || g.standoff,
      lookAt: [Number(lookX.value) || 0, 0, Number(lookZ.value) || 0],
    });
  }
  for (const input of [standoff, lookX, lookZ]) {
    input.addEventListener("change", syncGizmo);
  }

  el<HTMLButtonElement>("capture").addEventListener("click", () => {
    void placeAndCapture(api, store);
  });

  // --- event stream (single consumer, seq-resumable) ----------------------
  const stream = new EventStream(baseUrl, sessionId, {
    onEvent: (event) => {
      store.addEvent(event);
      const p = integrationPayloadSchema.safeParse(event.payload);
      if (p.success && p.data.mesh_stale) void fetchSnapshot(api, store);
    },
    onStatus: (status) => {
      if (status !== "stopped") store.setConnection(status);
    },
  });
  void stream.run();

  void fetchSnapshot(api, store);
}
