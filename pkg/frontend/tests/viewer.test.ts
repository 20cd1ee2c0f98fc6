import { describe, expect, it } from "vitest";
import { parseSnapshot } from "../src/snapshot.js";
import { faceBuckets, faceColors, buildGeometry } from "../src/viewer.js";
import { UNOBSERVED_RGB } from "../src/colors.js";
import { loadFixture, makeGridSnapshotPayload } from "./helpers.js";

const fixture = loadFixture();
const SAT = fixture.color_tables.redundancy.saturation;

// 80x64 quads -> 10240 faces
const COLS = 80;
const ROWS = 64;
const N_FACES = 2 * COLS * ROWS;

/** Server-computed reference bucket for a GSD value, via the fixture cases. */
function serverGsdBucket(value: number, lo: number, hi: number): number {
  const t = (Math.log(hi) - Math.log(Math.max(value, 1e-12))) / (Math.log(hi) - Math.log(lo));
  return Math.min(7, Math.max(0, Math.floor(t * 8)));
}

function gsdSnapshot() {
  const lo = 0.0012;
  const hi = 0.045;
  const values = new Float32Array(N_FACES);
  const observed = new Uint8Array(N_FACES);
  for (let i = 0; i < N_FACES; i++) {
    if (i % 17 === 3) {
      values[i] = NaN; // unobserved faces carry no GSD
      observed[i] = 0;
    } else {
      // log-sweep across the full scale plus margins beyond both ends
      const t = i / (N_FACES - 1);
      values[i] = Math.exp(Math.log(lo * 0.5) + t * (Math.log(hi * 2) - Math.log(lo * 0.5)));
      observed[i] = 1;
    }
  }
  const payload = makeGridSnapshotPayload({
    cols: COLS,
    rows: ROWS,
    overlay: { kind: "gsd", values, observed, scale: { lo, hi } },
  });
  return { snapshot: parseSnapshot(payload), values, observed, lo, hi };
}

function redundancySnapshot() {
  const values = new Float32Array(N_FACES);
  const observed = new Uint8Array(N_FACES);
  for (let i = 0; i < N_FACES; i++) {
    if (i % 23 === 7) {
      values[i] = 0;
      observed[i] = 0;
    } else {
      values[i] = i % 45; // sweeps past the saturation point
      observed[i] = 1;
    }
  }
  const payload = makeGridSnapshotPayload({
    cols: COLS,
    rows: ROWS,
    overlay: { kind: "redundancy", values, observed },
  });
  return { snapshot: parseSnapshot(payload), values, observed };
}

describe("snapshot rendering at 10k+ faces", () => {
  it("decodes a >=10k-face snapshot", () => {
    const { snapshot } = gsdSnapshot();
    expect(snapshot.nFaces).toBeGreaterThanOrEqual(10_000);
    expect(snapshot.vertices.length).toBe(snapshot.nVertices * 3);
    expect(snapshot.faces.length).toBe(snapshot.nFaces * 3);
  });

  it("GSD overlay buckets match the exported numeric tables on every face", () => {
    const { snapshot, values, observed, lo, hi } = gsdSnapshot();
    const buckets = faceBuckets(snapshot);
    const colors = faceColors(snapshot);
    for (let i = 0; i < snapshot.nFaces; i++) {
      if (!observed[i]) {
        expect(buckets[i]).toBe(-1);
        expect(colors[i]).toEqual(UNOBSERVED_RGB);
        continue;
      }
      const expected = serverGsdBucket(values[i]!, lo, hi);
      expect(buckets[i]).toBe(expected);
      expect(colors[i]).toEqual(fixture.color_tables.stops[expected]);
    }
  });

  it("GSD bucket formula agrees with the server on exported reference cases", () => {
    for (const c of fixture.gsd_cases) {
      expect(serverGsdBucket(c.value, c.lo, c.hi)).toBe(c.bucket);
    }
  });

  it("redundancy overlay buckets match the exported numeric tables on every face", () => {
    const { snapshot, values, observed } = redundancySnapshot();
    const buckets = faceBuckets(snapshot);
    const colors = faceColors(snapshot);
    const byValue = new Map(fixture.redundancy_cases.map((c) => [c.value, c.bucket]));
    for (let i = 0; i < snapshot.nFaces; i++) {
      if (!observed[i]) {
        expect(buckets[i]).toBe(-1);
        expect(colors[i]).toEqual(UNOBSERVED_RGB);
        continue;
      }
      const expected = byValue.get(values[i]!);
      expect(expected, `no server reference for redundancy ${values[i]}`).toBeDefined();
      expect(buckets[i]).toBe(expected);
      expect(colors[i]).toEqual(fixture.color_tables.stops[expected!]);
      if (values[i]! >= SAT) expect(buckets[i]).toBe(7);
    }
  });

  it("geometry carries flat per-face colors and observation flags", () => {
    const { snapshot, observed } = gsdSnapshot();
    const geometry = buildGeometry(snapshot);
    const pos = geometry.getAttribute("position");
    const col = geometry.getAttribute("color");
    const obs = geometry.getAttribute("observed");
    expect(pos.count).toBe(snapshot.nFaces * 3);
    const colors = faceColors(snapshot);
    for (const f of [0, 1, 999, 5000, snapshot.nFaces - 1]) {
      const [r, g, b] = colors[f]!;
      for (let corner = 0; corner < 3; corner++) {
        const v = f * 3 + corner;
        expect(col.getX(v)).toBeCloseTo(r / 255, 6);
        expect(col.getY(v)).toBeCloseTo(g / 255, 6);
        expect(col.getZ(v)).toBeCloseTo(b / 255, 6);
        expect(obs.getX(v)).toBe(observed[f] ? 1 : 0);
      }
    }
  });

  it("renders a no-overlay snapshot entirely in the neutral fill", () => {
    const payload = makeGridSnapshotPayload({ cols: 8, rows: 8 });
    const snapshot = parseSnapshot(payload);
    expect(snapshot.overlay).toBeNull();
    for (const c of faceColors(snapshot)) expect(c).toEqual(UNOBSERVED_RGB);
  });
});
