/**
 * Mesh construction for the three.js viewer.
 *
 * Snapshots are rendered whole: each IntegrationEvent that marks the
 * mesh stale triggers a full snapshot refetch and the scene swaps the
 * previous geometry for a freshly built one (no incremental patching
 * of GPU buffers). Faces are expanded to non-indexed triangles so the
 * per-face overlay color is flat across each triangle; an `observed`
 * vertex attribute lets the material hatch unobserved faces.
 */
import * as THREE from "three";
import { Snapshot } from "./snapshot.js";
import {
  RGB,
  UNOBSERVED_RGB,
  bucketColor,
  gsdBucket,
  redundancyBucket,
} from "./colors.js";

/**
 * Per-face color-table bucket, or -1 where the face is unobserved.
 * Buckets come purely from service-provided scalars and the exported
 * table parameters carried in the snapshot itself.
 */
export function faceBuckets(snapshot: Snapshot): Int8Array {
  const buckets = new Int8Array(snapshot.nFaces).fill(-1);
  const overlay = snapshot.overlay;
  if (!overlay) return buckets;
  const saturation = snapshot.tables.redundancy.saturation;
  for (let i = 0; i < snapshot.nFaces; i++) {
    if (!overlay.observed[i]) continue;
    const v = overlay.values[i] ?? NaN;
    if (!Number.isFinite(v)) continue;
    buckets[i] =
      overlay.kind === "gsd"
        ? gsdBucket(v, overlay.scale!.lo, overlay.scale!.hi)
        : redundancyBucket(v, saturation);
  }
  return buckets;
}

/** Per-face RGB (0-255) from the snapshot's own color tables. */
export function faceColors(snapshot: Snapshot): RGB[] {
  const buckets = faceBuckets(snapshot);
  const colors: RGB[] = new Array(snapshot.nFaces);
  for (let i = 0; i < snapshot.nFaces; i++) {
    const b = buckets[i] ?? -1;
    colors[i] = b < 0 ? UNOBSERVED_RGB : bucketColor(snapshot.tables, b);
  }
  return colors;
}

export function buildGeometry(snapshot: Snapshot): THREE.BufferGeometry {
  const nFaces = snapshot.nFaces;
  const positions = new Float32Array(nFaces * 9);
  const colors = new Float32Array(nFaces * 9);
  const observed = new Float32Array(nFaces * 3);
  const rgb = faceColors(snapshot);
  const ov = snapshot.overlay;

  for (let f = 0; f < nFaces; f++) {
    const [r, g, b] = rgb[f]!;
    const seen = ov && ov.observed[f] ? 1 : 0;
    for (let corner = 0; corner < 3; corner++) {
      const vi = snapshot.faces[f * 3 + corner]!;
      const o = (f * 3 + corner) * 3;
      positions[o] = snapshot.vertices[vi * 3]!;
      positions[o + 1] = snapshot.vertices[vi * 3 + 1]!;
      positions[o + 2] = snapshot.vertices[vi * 3 + 2]!;
      colors[o] = r / 255;
      colors[o + 1] = g / 255;
      colors[o + 2] = b / 255;
      observed[f * 3 + corner] = seen;
    }
  }

  const geometry = new THREE.BufferGeometry();
  geometry.setAttribute("position", new THREE.BufferAttribute(positions, 3));
  geometry.setAttribute("color", new THREE.BufferAttribute(colors, 3));
  geometry.setAttribute("observed", new THREE.BufferAttribute(observed, 1));
  geometry.computeVertexNormals();
  return geometry;
}

/** Vertex-colored material; unobserved faces are hatched in screen space. */
export function buildMaterial(): THREE.Material {
  const material = new THREE.MeshLambertMaterial({
    vertexColors: true,
    side: THREE.DoubleSide,
  });
  material.onBeforeCompile = (shader) => {
    shader.vertexShader = shader.vertexShader
      .replace(
        "#include <common>",
        "#include <common>\nattribute float observed;\nvarying float vObserved;",
      )
      .replace(
        "#include <begin_vertex>",
        "#include <begin_vertex>\nvObserved = observed;",
      );
    shader.fragmentShader = shader.fragmentShader
      .replace("#include <common>", "#include <common>\nvarying float vObserved;")
      .replace(
        "#include <dithering_fragment>",
        [
          "#include <dithering_fragment>",
          "if (vObserved < 0.5) {",
          "  float stripe = mod(gl_FragCoord.x + gl_FragCoord.y, 8.0);",
          "  if (stripe < 3.0) gl_FragColor.rgb *= 0.55;",
          "}",
        ].join("\n"),
      );
  };
  return material;
}

export function buildMesh(snapshot: Snapshot): THREE.Mesh {
  return new THREE.Mesh(buildGeometry(snapshot), buildMaterial());
}
