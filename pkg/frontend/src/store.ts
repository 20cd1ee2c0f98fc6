/**
 * View state for the feedback UI: the current immutable snapshot, the
 * seq-ordered event feed, connection status, the placement gizmo, and
 * transient prompts (capture retry, schema-mismatch banner).
 *
 * State transitions replace the state object; subscribers diff by
 * reference. Event-feed order always equals seq order — events arrive
 * already ordered from the resumable stream and out-of-order or
 * duplicate seqs are dropped rather than re-sorted.
 */
import { Snapshot } from "./snapshot.js";
import { SessionEvent } from "./protocol.js";
import { GizmoState, defaultGizmo } from "./gizmo.js";

export type OverlayMode = "gsd" | "redundancy" | "none";
export type ConnectionStatus = "idle" | "connected" | "reconnecting";

export interface RetryPrompt {
  readonly imageId: number;
  readonly inlierCount: number;
  readonly message: string;
}

export interface ViewState {
  readonly snapshot: Snapshot | null;
  readonly overlayMode: OverlayMode;
  readonly events: readonly SessionEvent[];
  readonly lastSeq: number;
  readonly connection: ConnectionStatus;
  readonly gizmo: GizmoState;
  readonly retryPrompt: RetryPrompt | null;
  readonly schemaError: string | null;
  readonly captureInFlight: boolean;
}

export function initialState(): ViewState {
  return {
    snapshot: null,
    overlayMode: "gsd",
    events: [],
    lastSeq: 0,
    connection: "idle",
    gizmo: defaultGizmo(),
    retryPrompt: null,
    schemaError: null,
    captureInFlight: false,
  };
}

export type Listener = (state: ViewState) => void;

export class Store {
  private state: ViewState;
  private listeners = new Set<Listener>();

  constructor(state: ViewState = initialState()) {
    this.state = state;
  }

  getState(): ViewState {
    return this.state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  }

  update(patch: Partial<ViewState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  setSnapshot(snapshot: Snapshot): void {
    this.update({ snapshot, retryPrompt: null });
  }

  setOverlayMode(overlayMode: OverlayMode): void {
    this.update({ overlayMode });
  }

  setGizmo(gizmo: GizmoState): void {
    this.update({ gizmo });
  }

  setConnection(connection: ConnectionStatus): void {
    this.update({ connection });
  }

  setRetryPrompt(prompt: RetryPrompt | null): void {
    this.update({ retryPrompt: prompt });
  }

  setSchemaError(message: string | null): void {
    this.update({ schemaError: message });
  }

  /** Append an event; enforces strictly increasing seq (duplicates dropped). */
  addEvent(event: SessionEvent): boolean {
    if (event.seq <= this.state.lastSeq) return false;
    this.update({
      events: [...this.state.events, event],
      lastSeq: event.seq,
    });
    return true;
  }
}
