/**
 * Color mapping through the service-exported numeric tables.
 *
 * These functions take every number they need — stops, saturation,
 * scale bounds — from the `color_tables` / `overlay.scale` blocks of
 * the snapshot payload. Nothing here is a locally-defined quality
 * model; the bucketing arithmetic is the published table contract
 * (log-scale 8-way split for GSD, linear saturation for redundancy)
 * and component tests compare rendered buckets back to those tables.
 */
import { ColorTables, SchemaMismatchError, PROTOCOL_VERSION } from "./protocol.js";

export type RGB = readonly [number, number, number];

/** Neutral fill for faces no camera has observed (rendered hatched). */
export const UNOBSERVED_RGB: RGB = [128, 128, 128];

export function checkTables(tables: ColorTables): void {
  if (tables.schema_version !== PROTOCOL_VERSION) {
    throw new SchemaMismatchError(
      `color table schema ${tables.schema_version} != supported ${PROTOCOL_VERSION}`,
    );
  }
}

/** Bucket 0 (coarse) .. 7 (fine) on the log scale [lo, hi] from the payload. */
export function gsdBucket(gsd: number, lo: number, hi: number): number {
  if (!(lo > 0 && hi > lo)) {
    throw new RangeError(`invalid GSD scale lo=${lo} hi=${hi}`);
  }
  const t = (Math.log(hi) - Math.log(Math.max(gsd, 1e-12))) / (Math.log(hi) - Math.log(lo));
  return Math.min(7, Math.max(0, Math.floor(t * 8)));
}

/** Bucket 0..7, saturating at `saturation` observers (from the payload). */
export function redundancyBucket(redundancy: number, saturation: number): number {
  return Math.min(7, Math.floor((Math.max(redundancy, 0) * 8) / saturation));
}

export function bucketColor(tables: ColorTables, bucket: number): RGB {
  const stop = tables.stops[bucket];
  if (!stop) throw new RangeError(`bucket ${bucket} outside the 8-stop table`);
  return stop;
}

export interface LegendEntry {
  bucket: number;
  color: RGB;
  label: string;
}

/** Legend rows for the GSD overlay: one per stop, labelled in m/px. */
export function gsdLegend(tables: ColorTables, lo: number, hi: number): LegendEntry[] {
  const entries: LegendEntry[] = [];
  for (let b = 0; b < 8; b++) {
    // bucket b covers t in [b/8, (b+1)/8): log-interpolate back to m/px
    const gHigh = Math.exp(Math.log(hi) - (b / 8) * (Math.log(hi) - Math.log(lo)));
    const gLow = Math.exp(Math.log(hi) - ((b + 1) / 8) * (Math.log(hi) - Math.log(lo)));
    entries.push({
      bucket: b,
      color: bucketColor(tables, b),
      label: `${gLow.toExponential(2)}–${gHigh.toExponential(2)} m/px`,
    });
  }
  return entries;
}

/** Legend rows for redundancy: observer-count ranges up to saturation. */
export function redundancyLegend(tables: ColorTables): LegendEntry[] {
  const sat = tables.redundancy.saturation;
  const entries: LegendEntry[] = [];
  for (let b = 0; b < 8; b++) {
    const rLow = Math.ceil((b * sat) / 8);
    const label = b === 7 ? `≥${rLow} views` : `${rLow}–${Math.ceil(((b + 1) * sat) / 8) - 1} views`;
    entries.push({ bucket: b, color: bucketColor(tables, b), label });
  }
  return entries;
}
