/**
 * Wire protocol: zod schemas for service payloads plus binary decoding
 * of the base64-packed mesh and overlay arrays.
 *
 * The UI never computes quality values. Every scalar rendered here
 * (GSD, redundancy) arrives from the service, and colors are produced
 * only by mapping those scalars through the numeric color tables the
 * service exports alongside each snapshot.
 */
import { z } from "zod";

export const PROTOCOL_VERSION = 1;

export const colorTablesSchema = z.object({
  schema_version: z.number().int(),
  stops: z.array(z.tuple([z.number(), z.number(), z.number()])).length(8),
  gsd: z.object({ scale: z.string(), bucket0: z.string() }),
  redundancy: z.object({ saturation: z.number().int().positive() }),
});
export type ColorTables = z.infer<typeof colorTablesSchema>;

export const overlaySchema = z.object({
  kind: z.enum(["gsd", "redundancy"]),
  values_b64: z.string(),
  observed_b64: z.string(),
  scale: z.object({ lo: z.number(), hi: z.number() }).optional(),
});

export const snapshotPayloadSchema = z.object({
  protocol: z.number().int(),
  session_id: z.string(),
  seq: z.number().int(),
  revision: z.number().int(),
  n_vertices: z.number().int().nonnegative(),
  n_faces: z.number().int().nonnegative(),
  vertices_b64: z.string(),
  faces_b64: z.string(),
  overlay: overlaySchema.nullable(),
  color_tables: colorTablesSchema,
});
export type SnapshotPayload = z.infer<typeof snapshotPayloadSchema>;

export const integrationPayloadSchema = z.object({
  image_id: z.number().int(),
  status: z.string(),
  inlier_count: z.number().int(),
  new_point_count: z.number().int(),
  n_cameras: z.number().int(),
  n_points: z.number().int(),
  revision: z.number().int(),
  map_hash: z.string(),
  mesh_stale: z.boolean(),
});
export type IntegrationPayload = z.infer<typeof integrationPayloadSchema>;

export const sessionEventSchema = z.object({
  seq: z.number().int().positive(),
  kind: z.string(),
  payload: z.record(z.unknown()),
});
export type SessionEvent = z.infer<typeof sessionEventSchema>;

export class SchemaMismatchError extends Error {}

export function decodeBase64(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const raw = atob(b64);
    const out = new Uint8Array(raw.length);
    for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
    return out;
  }
  // Node fallback (vitest / SSR)
  const buf = Buffer.from(b64, "base64");
  return new Uint8Array(buf.buffer, buf.byteOffset, buf.byteLength);
}

function littleEndianHost(): boolean {
  return new Uint8Array(new Uint32Array([1]).buffer)[0] === 1;
}

/** Decode little-endian float32 payload regardless of host byte order. */
export function decodeF32(b64: string): Float32Array {
  const bytes = decodeBase64(b64);
  const copy = bytes.slice(); // ensure alignment
  if (littleEndianHost()) {
    return new Float32Array(copy.buffer, 0, copy.byteLength / 4);
  }
  const view = new DataView(copy.buffer);
  const out = new Float32Array(copy.byteLength / 4);
  for (let i = 0; i < out.length; i++) out[i] = view.getFloat32(i * 4, true);
  return out;
}

/** Decode little-endian uint32 payload regardless of host byte order. */
export function decodeU32(b64: string): Uint32Array {
  const bytes = decodeBase64(b64);
  const copy = bytes.slice();
  if (littleEndianHost()) {
    return new Uint32Array(copy.buffer, 0, copy.byteLength / 4);
  }
  const view = new DataView(copy.buffer);
  const out = new Uint32Array(copy.byteLength / 4);
  for (let i = 0; i < out.length; i++) out[i] = view.getUint32(i * 4, true);
  return out;
}

export function decodeU8(b64: string): Uint8Array {
  return decodeBase64(b64).slice();
}
