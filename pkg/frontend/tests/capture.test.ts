import { describe, expect, it } from "vitest";
import { Store } from "../src/store.js";
import { placeAndCapture, fetchSnapshot, ApiClient } from "../src/capture.js";
import { parseSnapshot } from "../src/snapshot.js";
import { toPoseSpec, cameraPosition, defaultGizmo, ConstrainedGizmo } from "../src/gizmo.js";
import { integrationEvent, jsonResponse, makeGridSnapshotPayload } from "./helpers.js";

function makeApi(
  handler: (url: string, init?: RequestInit) => Response | Promise<Response>,
): { api: ApiClient; calls: { url: string; init?: RequestInit }[] } {
  const calls: { url: string; init?: RequestInit }[] = [];
  const fetchImpl = (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    calls.push({ url, init });
    return handler(url, init);
  }) as typeof fetch;
  return { api: { baseUrl: "http://svc", sessionId: "s1", fetchImpl }, calls };
}

function seededStore(): Store {
  const store = new Store();
  store.setSnapshot(parseSnapshot(makeGridSnapshotPayload({ cols: 4, rows: 4, seq: 1 })));
  return store;
}

describe("place-and-capture", () => {
  it("NotLocalized raises a retry prompt and leaves the mesh untouched", async () => {
    const store = seededStore();
    const held = store.getState().snapshot;
    const { api, calls } = makeApi((url) => {
      if (url.includes("/capture")) {
        return jsonResponse(integrationEvent(5, "NotLocalized", 9));
      }
      throw new Error(`unexpected request ${url}`);
    });

    const status = await placeAndCapture(api, store);

    expect(status).toBe("NotLocalized");
    const state = store.getState();
    expect(state.retryPrompt).not.toBeNull();
    expect(state.retryPrompt!.imageId).toBe(9);
    expect(state.retryPrompt!.message).toMatch(/could not be localized/i);
    expect(state.retryPrompt!.message).toMatch(/capture again/i);
    // the held snapshot object is the same reference: no mesh change
    expect(state.snapshot).toBe(held);
    // no snapshot refetch happened
    expect(calls.filter((c) => c.url.includes("/snapshot"))).toHaveLength(0);
    // the failed integration still lands in the event feed, in seq order
    expect(state.events.map((e) => e.seq)).toEqual([5]);
    expect(state.captureInFlight).toBe(false);
  });

  it("Localized refetches the snapshot and clears the prompt", async () => {
    const store = seededStore();
    store.setRetryPrompt({ imageId: 9, inlierCount: 4, message: "retry" });
    const held = store.getState().snapshot;
    const { api, calls } = makeApi((url) => {
      if (url.includes("/capture")) {
        return jsonResponse(integrationEvent(6, "Localized", 10));
      }
      if (url.includes("/snapshot")) {
        return jsonResponse(makeGridSnapshotPayload({ cols: 4, rows: 4, seq: 6 }));
      }
      throw new Error(`unexpected request ${url}`);
    });

    const status = await placeAndCapture(api, store);

    expect(status).toBe("Localized");
    const state = store.getState();
    expect(state.retryPrompt).toBeNull();
    expect(state.snapshot).not.toBe(held);
    expect(state.snapshot!.seq).toBe(6);
    const snapCalls = calls.filter((c) => c.url.includes("/snapshot"));
    expect(snapCalls).toHaveLength(1);
    // refetch respects the active overlay mode
    expect(snapCalls[0]!.url).toContain("overlay=gsd");
  });

  it("posts the constrained gizmo pose as position + look-at", async () => {
    const store = seededStore();
    const gizmo: ConstrainedGizmo = {
      mode: "constrained",
      lookAt: [1.5, 0, 0.8],
      standoff: 4,
      normal: [0, 1, 0],
      offset: [0.5, -0.25],
    };
    store.setGizmo(gizmo);
    const { api, calls } = makeApi((url) => {
      if (url.includes("/capture")) {
        return jsonResponse(integrationEvent(2, "NotLocalized", 2));
      }
      throw new Error(`unexpected request ${url}`);
    });

    await placeAndCapture(api, store);

    const body = JSON.parse(String(calls[0]!.init?.body));
    expect(body.pose.look_at).toEqual([1.5, 0, 0.8]);
    expect(body.pose.position).toEqual([...cameraPosition(gizmo)]);
    // constrained pose always stands off the facade plane
    expect(body.pose.position[1]).toBeCloseTo(4, 9);
  });
});

describe("gizmo", () => {
  it("derives the camera position from look-at, standoff, and offset", () => {
    const g: ConstrainedGizmo = {
      mode: "constrained",
      lookAt: [2, 0, 1],
      standoff: 3,
      normal: [0, 2, 0], // non-unit input is normalized
      offset: [0.5, 0.25],
    };
    const p = cameraPosition(g);
    expect(p[1]).toBeCloseTo(3, 9);
    // offset stays inside the standoff plane
    expect(Math.hypot(p[0] - 2, p[2] - 1)).toBeCloseTo(Math.hypot(0.5, 0.25), 9);
  });

  it("free mode passes the explicit 6-dof pose through", () => {
    const spec = toPoseSpec({ mode: "free", q: [1, 0, 0, 0], t: [1, 2, 3] });
    expect(spec).toEqual({ q: [1, 0, 0, 0], t: [1, 2, 3] });
  });

  it("rejects a non-positive standoff", () => {
    expect(() => toPoseSpec({ ...defaultGizmo(), standoff: 0 } as ConstrainedGizmo)).toThrow();
  });
});

describe("snapshot fetch schema guard", () => {
  it("surfaces a banner on protocol mismatch without replacing the mesh", async () => {
    const store = seededStore();
    const held = store.getState().snapshot;
    const bad = { ...makeGridSnapshotPayload({ cols: 4, rows: 4 }), protocol: 99 };
    const { api } = makeApi(() => jsonResponse(bad));

    await fetchSnapshot(api, store);

    expect(store.getState().schemaError).toMatch(/protocol 99/);
    expect(store.getState().snapshot).toBe(held);
  });
});
