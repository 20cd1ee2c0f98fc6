/**
 * Immutable snapshot model: decoded mesh + overlay arrays, parsed once
 * from a service payload and frozen. The viewer and store only ever
 * swap whole Snapshot objects, never mutate one in place.
 */
import {
  ColorTables,
  SchemaMismatchError,
  SnapshotPayload,
  PROTOCOL_VERSION,
  decodeF32,
  decodeU32,
  decodeU8,
  snapshotPayloadSchema,
} from "./protocol.js";
import { checkTables } from "./colors.js";

export interface OverlayData {
  readonly kind: "gsd" | "redundancy";
  /** Per-face scalar straight from the service (NaN allowed where unobserved). */
  readonly values: Float32Array;
  /** Per-face 0/1 observation flag. */
  readonly observed: Uint8Array;
  /** GSD log-scale bounds; present only for kind === "gsd". */
  readonly scale?: { readonly lo: number; readonly hi: number };
}

export interface Snapshot {
  readonly sessionId: string;
  readonly seq: number;
  readonly revision: number;
  readonly nVertices: number;
  readonly nFaces: number;
  /** Flat xyz triples, nVertices * 3. */
  readonly vertices: Float32Array;
  /** Flat vertex-index triples, nFaces * 3. */
  readonly faces: Uint32Array;
  readonly overlay: OverlayData | null;
  readonly tables: ColorTables;
}

export function parseSnapshot(raw: unknown): Snapshot {
  const payload: SnapshotPayload = snapshotPayloadSchema.parse(raw);
  if (payload.protocol !== PROTOCOL_VERSION) {
    throw new SchemaMismatchError(
      `snapshot protocol ${payload.protocol} != supported ${PROTOCOL_VERSION}`,
    );
  }
  checkTables(payload.color_tables);

  const vertices = decodeF32(payload.vertices_b64);
  const faces = decodeU32(payload.faces_b64);
  if (vertices.length !== payload.n_vertices * 3) {
    throw new SchemaMismatchError(
      `vertex buffer holds ${vertices.length / 3} points, header says ${payload.n_vertices}`,
    );
  }
  if (faces.length !== payload.n_faces * 3) {
    throw new SchemaMismatchError(
      `face buffer holds ${faces.length / 3} triangles, header says ${payload.n_faces}`,
    );
  }

  let overlay: OverlayData | null = null;
  if (payload.overlay) {
    const values = decodeF32(payload.overlay.values_b64);
    const observed = decodeU8(payload.overlay.observed_b64);
    if (values.length !== payload.n_faces || observed.length !== payload.n_faces) {
      throw new SchemaMismatchError(
        `overlay arrays (${values.length}/${observed.length}) do not match ${payload.n_faces} faces`,
      );
    }
    if (payload.overlay.kind === "gsd" && !payload.overlay.scale) {
      throw new SchemaMismatchError("gsd overlay is missing its scale block");
    }
    overlay = {
      kind: payload.overlay.kind,
      values,
      observed,
      ...(payload.overlay.scale ? { scale: payload.overlay.scale } : {}),
    };
  }

  return Object.freeze({
    sessionId: payload.session_id,
    seq: payload.seq,
    revision: payload.revision,
    nVertices: payload.n_vertices,
    nFaces: payload.n_faces,
    vertices,
    faces,
    overlay,
    tables: payload.color_tables,
  });
}
