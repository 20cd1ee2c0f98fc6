/**
 * Test helpers: synthetic snapshot payloads shaped exactly like the
 * service wire format, plus the server-exported fixture tables.
 */
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { ColorTables } from "../src/protocol.js";

export interface BucketFixture {
  color_tables: ColorTables;
  gsd_cases: { value: number; lo: number; hi: number; bucket: number }[];
  redundancy_cases: { value: number; bucket: number }[];
}

export function loadFixture(): BucketFixture {
  const path = fileURLToPath(new URL("./fixtures/bucket_cases.json", import.meta.url));
  return JSON.parse(readFileSync(path, "utf-8")) as BucketFixture;
}

export function b64(arr: Float32Array | Uint32Array | Uint8Array): string {
  return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength).toString("base64");
}

export interface GridOptions {
  cols: number;
  rows: number;
  overlay?: {
    kind: "gsd" | "redundancy";
    values: Float32Array;
    observed: Uint8Array;
    scale?: { lo: number; hi: number };
  };
  seq?: number;
  tables?: ColorTables;
}

/**
 * Planar triangulated grid: (cols*rows) quads -> 2*cols*rows faces,
 * packaged as a full snapshot payload.
 */
export function makeGridSnapshotPayload(opts: GridOptions): Record<string, unknown> {
  const { cols, rows } = opts;
  const nVerts = (cols + 1) * (rows + 1);
  const nFaces = 2 * cols * rows;
  const vertices = new Float32Array(nVerts * 3);
  for (let r = 0; r <= rows; r++) {
    for (let c = 0; c <= cols; c++) {
      const i = r * (cols + 1) + c;
      vertices[i * 3] = c * 0.05;
      vertices[i * 3 + 1] = 0;
      vertices[i * 3 + 2] = r * 0.05;
    }
  }
  const faces = new Uint32Array(nFaces * 3);
  let f = 0;
  for (let r = 0; r < rows; r++) {
    for (let c = 0; c < cols; c++) {
      const a = r * (cols + 1) + c;
      const b = a + 1;
      const d = a + (cols + 1);
      const e = d + 1;
      faces.set([a, b, d], f * 3);
      f++;
      faces.set([b, e, d], f * 3);
      f++;
    }
  }

  const tables = opts.tables ?? loadFixture().color_tables;
  let overlay: Record<string, unknown> | null = null;
  if (opts.overlay) {
    if (opts.overlay.values.length !== nFaces) {
      throw new Error(`overlay needs ${nFaces} values`);
    }
    overlay = {
      kind: opts.overlay.kind,
      values_b64: b64(opts.overlay.values),
      observed_b64: b64(opts.overlay.observed),
      ...(opts.overlay.scale ? { scale: opts.overlay.scale } : {}),
    };
  }

  return {
    protocol: 1,
    session_id: "test-session",
    seq: opts.seq ?? 1,
    revision: 1,
    n_vertices: nVerts,
    n_faces: nFaces,
    vertices_b64: b64(vertices),
    faces_b64: b64(faces),
    overlay,
    color_tables: tables,
  };
}

export function integrationEvent(
  seq: number,
  status: "Localized" | "NotLocalized",
  imageId: number,
): Record<string, unknown> {
  return {
    seq,
    kind: "IntegrationEvent",
    payload: {
      image_id: imageId,
      status,
      inlier_count: status === "Localized" ? 120 : 4,
      new_point_count: status === "Localized" ? 35 : 0,
      n_cameras: imageId,
      n_points: 1000 + imageId,
      revision: seq,
      map_hash: `hash-${seq}`,
      mesh_stale: status === "Localized",
    },
  };
}

export function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}
