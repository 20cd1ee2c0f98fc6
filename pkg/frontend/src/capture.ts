/**
 * Place-and-capture command flow.
 *
 * The capture POST returns the integration event for the synthesized
 * image. On Localized the mesh is stale, so the current overlay's
 * snapshot is re-fetched in full and swapped into the store. On
 * NotLocalized the store gains a prominent retry prompt and the held
 * snapshot object is left untouched — a failed localization never
 * mutates the mesh the operator is looking at.
 */
import { Store } from "./store.js";
import { GizmoState, toPoseSpec } from "./gizmo.js";
import { parseSnapshot } from "./snapshot.js";
import {
  SchemaMismatchError,
  integrationPayloadSchema,
  sessionEventSchema,
} from "./protocol.js";

export interface ApiClient {
  readonly baseUrl: string;
  readonly sessionId: string;
  readonly fetchImpl?: typeof fetch;
}

export async function fetchSnapshot(api: ApiClient, store: Store): Promise<void> {
  const f = api.fetchImpl ?? fetch;
  const overlay = store.getState().overlayMode;
  const resp = await f(
    `${api.baseUrl}/sessions/${api.sessionId}/snapshot?overlay=${overlay}`,
  );
  if (!resp.ok) throw new Error(`snapshot HTTP ${resp.status}`);
  try {
    store.setSnapshot(parseSnapshot(await resp.json()));
    store.setSchemaError(null);
  } catch (err) {
    if (err instanceof SchemaMismatchError) {
      store.setSchemaError(err.message);
      return;
    }
    throw err;
  }
}

export async function placeAndCapture(
  api: ApiClient,
  store: Store,
  gizmo: GizmoState = store.getState().gizmo,
): Promise<"Localized" | "NotLocalized"> {
  const f = api.fetchImpl ?? fetch;
  store.update({ captureInFlight: true, retryPrompt: null });
  try {
    const resp = await f(`${api.baseUrl}/sessions/${api.sessionId}/capture`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ pose: toPoseSpec(gizmo) }),
    });
    if (!resp.ok) throw new Error(`capture HTTP ${resp.status}`);
    const event = sessionEventSchema.parse(await resp.json());
    store.addEvent(event);
    const report = integrationPayloadSchema.parse(event.payload);

    if (report.status === "Localized") {
      await fetchSnapshot(api, store);
      return "Localized";
    }
    store.setRetryPrompt({
      imageId: report.image_id,
      inlierCount: report.inlier_count,
      message:
        `Image ${report.image_id} could not be localized ` +
        `(${report.inlier_count} inliers). Adjust the standoff or aim at ` +
        `better-covered facade area, then capture again.`,
    });
    return "NotLocalized";
  } finally {
    store.update({ captureInFlight: false });
  }
}
