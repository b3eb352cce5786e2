/**
 * GeoTIFF I/O for the grids this package exchanges with the core pipeline.
 *
 * Reads the pipeline's write profile (little-endian classic TIFF, tiled or
 * stripped, uncompressed or Deflate, float32 or uint8/uint16 samples,
 * chunky interleave) with north-up georeferencing from ModelPixelScale +
 * ModelTiepoint and an EPSG code in the GeoKey directory. Writes the same
 * profile: 256x256 tiles, Deflate, float32, no timestamps.
 */

import * as fs from 'fs';
import * as zlib from 'zlib';

export interface GeoTransform {
  originX: number;
  originY: number;
  pixelSizeX: number;
  pixelSizeY: number;
}

export interface Grid {
  width: number;
  height: number;
  bands: number;
  /** band-major, each band row-major */
  values: Float32Array;
  geo: GeoTransform;
  crsId: number;
  nodata: number | null;
}

const TAG = {
  width: 256, height: 257, bits: 258, compression: 259, photometric: 262,
  stripOffsets: 273, samplesPerPixel: 277, rowsPerStrip: 278,
  stripByteCounts: 279, planar: 284, tileWidth: 322, tileLength: 323,
  tileOffsets: 324, tileByteCounts: 325, extraSamples: 338, sampleFormat: 339,
  pixelScale: 33550, tiepoint: 33922, geoKeys: 34735, nodata: 42113,
} as const;

const TYPE_SIZE: Record<number, number> = {
  1: 1, 2: 1, 3: 2, 4: 4, 5: 8, 12: 8,
};

class Reader {
  view: DataView;
  little: boolean;

  constructor(private buf: Buffer, private path: string) {
    this.view = new DataView(buf.buffer, buf.byteOffset, buf.byteLength);
    if (buf.length < 8) throw new Error(`${path}: not a TIFF (too short)`);
    const order = buf.toString('ascii', 0, 2);
    if (order === 'II') this.little = true;
    else if (order === 'MM') this.little = false;
    else throw new Error(`${path}: bad TIFF byte-order mark`);
    if (this.u16(2) !== 42) throw new Error(`${path}: bad TIFF magic`);
  }

  u16(off: number): number { return this.view.getUint16(off, this.little); }
  u32(off: number): number { return this.view.getUint32(off, this.little); }
  f64(off: number): number { return this.view.getFloat64(off, this.little); }

  readIfd(): Map<number, number[] | string> {
    const tags = new Map<number, number[] | string>();
    const ifd = this.u32(4);
    const n = this.u16(ifd);
    for (let i = 0; i < n; i++) {
      const base = ifd + 2 + 12 * i;
      const tag = this.u16(base);
      const type = this.u16(base + 2);
      const count = this.u32(base + 4);
      const size = TYPE_SIZE[type];
      if (size === undefined) continue;
      const total = size * count;
      const off = total <= 4 ? base + 8 : this.u32(base + 8);
      if (off + total > this.buf.length) {
        throw new Error(`${this.path}: truncated tag data at ${off}`);
      }
      if (type === 2) {
        tags.set(tag, this.buf.toString('ascii', off, off + count)
          .replace(/\0.*$/, ''));
        continue;
      }
      const vals: number[] = [];
      for (let k = 0; k < count; k++) {
        if (type === 1) vals.push(this.buf[off + k]);
        else if (type === 3) vals.push(this.u16(off + 2 * k));
        else if (type === 4) vals.push(this.u32(off + 4 * k));
        else if (type === 5) {
          const num = this.u32(off + 8 * k);
          const den = this.u32(off + 8 * k + 4);
          vals.push(den ? num / den : 0);
        } else if (type === 12) vals.push(this.f64(off + 8 * k));
      }
      tags.set(tag, vals);
    }
    return tags;
  }
}

function nums(tags: Map<number, number[] | string>, tag: number): number[] | undefined {
  const v = tags.get(tag);
  return Array.isArray(v) ? v : undefined;
}

function one(tags: Map<number, number[] | string>, tag: number, fallback?: number): number {
  const v = nums(tags, tag);
  if (v === undefined || v.length === 0) {
    if (fallback !== undefined) return fallback;
    throw new Error(`missing required TIFF tag ${tag}`);
  }
  return v[0];
}

export function readGeoTiff(path: string): Grid {
  const buf = fs.readFileSync(path);
  const rd = new Reader(buf, path);
  const tags = rd.readIfd();

  const width = one(tags, TAG.width);
  const height = one(tags, TAG.height);
  const bands = one(tags, TAG.samplesPerPixel, 1);
  const compression = one(tags, TAG.compression, 1);
  if (compression !== 1 && compression !== 8 && compression !== 32946) {
    throw new Error(`${path}: unsupported compression ${compression}`);
  }
  const planar = one(tags, TAG.planar, 1);
  if (planar !== 1) throw new Error(`${path}: planar layout not supported`);
  const bits = one(tags, TAG.bits, 8);
  const fmt = one(tags, TAG.sampleFormat, 1);
  if (!((bits === 32 && fmt === 3) || (bits === 8 && fmt === 1)
        || (bits === 16 && fmt === 1))) {
    throw new Error(`${path}: unsupported sample type bits=${bits} fmt=${fmt}`);
  }

  const out = new Float32Array(width * height * bands);
  const readChunk = (raw: Buffer, expected: number): Buffer => {
    const data = compression === 1 ? raw : zlib.inflateSync(raw);
    if (data.length < expected) {
      throw new Error(`${path}: chunk shorter than expected`);
    }
    return data;
  };
  const sampleBytes = bits / 8;
  const toFloat = (chunk: Buffer, idx: number): number => {
    if (bits === 32) return chunk.readFloatLE(idx * 4);
    if (bits === 16) return chunk.readUInt16LE(idx * 2);
    return chunk[idx];
  };

  if (tags.has(TAG.tileOffsets)) {
    const tw = one(tags, TAG.tileWidth);
    const th = one(tags, TAG.tileLength);
    const offsets = nums(tags, TAG.tileOffsets)!;
    const counts = nums(tags, TAG.tileByteCounts)!;
    const across = Math.ceil(width / tw);
    for (let t = 0; t < offsets.length; t++) {
      const chunk = readChunk(buf.subarray(offsets[t], offsets[t] + counts[t]),
                              tw * th * bands * sampleBytes);
      const tr = Math.floor(t / across) * th;
      const tc = (t % across) * tw;
      const rows = Math.min(th, height - tr);
      const cols = Math.min(tw, width - tc);
      for (let r = 0; r < rows; r++) {
        for (let c = 0; c < cols; c++) {
          for (let b = 0; b < bands; b++) {
            out[b * width * height + (tr + r) * width + (tc + c)] =
              toFloat(chunk, (r * tw + c) * bands + b);
          }
        }
      }
    }
  } else if (tags.has(TAG.stripOffsets)) {
    const rps = one(tags, TAG.rowsPerStrip, height);
    const offsets = nums(tags, TAG.stripOffsets)!;
    const counts = nums(tags, TAG.stripByteCounts)!;
    for (let s = 0; s < offsets.length; s++) {
      const startRow = s * rps;
      const rows = Math.min(rps, height - startRow);
      const chunk = readChunk(buf.subarray(offsets[s], offsets[s] + counts[s]),
                              rows * width * bands * sampleBytes);
      for (let r = 0; r < rows; r++) {
        for (let c = 0; c < width; c++) {
          for (let b = 0; b < bands; b++) {
            out[b * width * height + (startRow + r) * width + c] =
              toFloat(chunk, (r * width + c) * bands + b);
          }
        }
      }
    }
  } else {
    throw new Error(`${path}: neither tiles nor strips present`);
  }

  const scale = nums(tags, TAG.pixelScale);
  const tie = nums(tags, TAG.tiepoint);
  if (!scale || !tie || scale.length < 2 || tie.length < 6) {
    throw new Error(`${path}: missing georeferencing tags`);
  }
  const geo: GeoTransform = {
    originX: tie[3] - tie[0] * scale[0],
    originY: tie[4] + tie[1] * scale[1],
    pixelSizeX: scale[0],
    pixelSizeY: scale[1],
  };

  let crsId = 0;
  const keys = nums(tags, TAG.geoKeys);
  if (keys && keys.length >= 4) {
    const nKeys = keys[3];
    for (let k = 0; k < nKeys; k++) {
      const [keyId, loc, , value] = keys.slice(4 + 4 * k, 8 + 4 * k);
      if ((keyId === 3072 || keyId === 2048) && loc === 0) crsId = value;
      if (keyId === 3072) break;
    }
  }

  let nodata: number | null = null;
  const nd = tags.get(TAG.nodata);
  if (typeof nd === 'string') nodata = parseFloat(nd.trim());

  return { width, height, bands, values: out, geo, crsId, nodata };
}

const TILE = 256;

export function writeGeoTiff(grid: Grid, path: string): void {
  const { width, height, bands, values, geo } = grid;
  const across = Math.ceil(width / TILE);
  const down = Math.ceil(height / TILE);

  const tiles: Buffer[] = [];
  for (let tr = 0; tr < down; tr++) {
    for (let tc = 0; tc < across; tc++) {
      const tile = new Float32Array(TILE * TILE * bands);
      const rows = Math.min(TILE, height - tr * TILE);
      const cols = Math.min(TILE, width - tc * TILE);
      for (let r = 0; r < rows; r++) {
        for (let c = 0; c < cols; c++) {
          for (let b = 0; b < bands; b++) {
            tile[(r * TILE + c) * bands + b] =
              values[b * width * height + (tr * TILE + r) * width
                     + (tc * TILE + c)];
          }
        }
      }
      tiles.push(zlib.deflateSync(Buffer.from(tile.buffer), { level: 6 }));
    }
  }

  const geographic = grid.crsId >= 4000 && grid.crsId < 5000;
  const geoKeys = [1, 1, 0, 3,
                   1024, 0, 1, geographic ? 2 : 1,
                   1025, 0, 1, 1,
                   geographic ? 2048 : 3072, 0, 1, grid.crsId];

  type Entry = { tag: number; type: number; count: number; payload: Buffer };
  const u16buf = (vals: number[]) => {
    const b = Buffer.alloc(2 * vals.length);
    vals.forEach((v, i) => b.writeUInt16LE(v, 2 * i));
    return b;
  };
  const u32buf = (vals: number[]) => {
    const b = Buffer.alloc(4 * vals.length);
    vals.forEach((v, i) => b.writeUInt32LE(v, 4 * i));
    return b;
  };
  const f64buf = (vals: number[]) => {
    const b = Buffer.alloc(8 * vals.length);
    vals.forEach((v, i) => b.writeDoubleLE(v, 8 * i));
    return b;
  };

  const entries: Entry[] = [
    { tag: TAG.width, type: 4, count: 1, payload: u32buf([width]) },
    { tag: TAG.height, type: 4, count: 1, payload: u32buf([height]) },
    { tag: TAG.bits, type: 3, count: bands, payload: u16buf(Array(bands).fill(32)) },
    { tag: TAG.compression, type: 3, count: 1, payload: u16buf([8]) },
    { tag: TAG.photometric, type: 3, count: 1, payload: u16buf([1]) },
    { tag: TAG.samplesPerPixel, type: 3, count: 1, payload: u16buf([bands]) },
    { tag: TAG.planar, type: 3, count: 1, payload: u16buf([1]) },
    { tag: TAG.tileWidth, type: 3, count: 1, payload: u16buf([TILE]) },
    { tag: TAG.tileLength, type: 3, count: 1, payload: u16buf([TILE]) },
    { tag: TAG.tileOffsets, type: 4, count: tiles.length,
      payload: u32buf(Array(tiles.length).fill(0)) },
    { tag: TAG.tileByteCounts, type: 4, count: tiles.length,
      payload: u32buf(tiles.map((t) => t.length)) },
    { tag: TAG.sampleFormat, type: 3, count: bands,
      payload: u16buf(Array(bands).fill(3)) },
    { tag: TAG.pixelScale, type: 12, count: 3,
      payload: f64buf([geo.pixelSizeX, geo.pixelSizeY, 0]) },
    { tag: TAG.tiepoint, type: 12, count: 6,
      payload: f64buf([0, 0, 0, geo.originX, geo.originY, 0]) },
    { tag: TAG.geoKeys, type: 3, count: geoKeys.length,
      payload: u16buf(geoKeys) },
  ];
  if (bands > 1) {
    entries.push({ tag: TAG.extraSamples, type: 3, count: bands - 1,
                   payload: u16buf(Array(bands - 1).fill(0)) });
  }
  if (grid.nodata !== null) {
    const text = Buffer.from(`${grid.nodata}\0`, 'ascii');
    entries.push({ tag: TAG.nodata, type: 2, count: text.length, payload: text });
  }
  entries.sort((a, b) => a.tag - b.tag);

  const ifdSize = 2 + 12 * entries.length + 4;
  const dataBase = 8 + ifdSize;
  const dataArea: Buffer[] = [];
  let dataLen = 0;
  let tileOffsetsPos = -1;

  const inline: Buffer[] = entries.map((e) => {
    if (e.payload.length <= 4) {
      const b = Buffer.alloc(4);
      e.payload.copy(b);
      return b;
    }
    const pos = dataBase + dataLen;
    if (e.tag === TAG.tileOffsets) tileOffsetsPos = pos;
    dataArea.push(e.payload);
    dataLen += e.payload.length;
    if (dataLen % 2) {
      dataArea.push(Buffer.alloc(1));
      dataLen += 1;
    }
    return u32buf([pos]);
  });

  const tileBase = dataBase + dataLen;
  const offsets: number[] = [];
  let pos = tileBase;
  for (const t of tiles) {
    offsets.push(pos);
    pos += t.length + (t.length % 2);
  }
  const offsetsPayload = u32buf(offsets);
  if (tileOffsetsPos >= 0) {
    let cursor = 0;
    for (let i = 0; i < dataArea.length; i++) {
      if (dataBase + cursor === tileOffsetsPos) {
        dataArea[i] = offsetsPayload;
        break;
      }
      cursor += dataArea[i].length;
    }
  } else {
    const idx = entries.findIndex((e) => e.tag === TAG.tileOffsets);
    inline[idx] = u32buf([offsets[0]]);
  }

  const head = Buffer.alloc(8 + ifdSize);
  head.write('II', 0, 'ascii');
  head.writeUInt16LE(42, 2);
  head.writeUInt32LE(8, 4);
  head.writeUInt16LE(entries.length, 8);
  entries.forEach((e, i) => {
    const base = 10 + 12 * i;
    head.writeUInt16LE(e.tag, base);
    head.writeUInt16LE(e.type, base + 2);
    head.writeUInt32LE(e.count, base + 4);
    inline[i].copy(head, base + 8);
  });
  head.writeUInt32LE(0, 10 + 12 * entries.length);

  const parts = [head, ...dataArea];
  for (const t of tiles) {
    parts.push(t);
    if (t.length % 2) parts.push(Buffer.alloc(1));
  }
  fs.writeFileSync(path, Buffer.concat(parts));
}

/** NDVI of a pixel given the band-major layout used by Grid. */
export function ndviAt(grid: Grid, row: number, col: number): number {
  const plane = grid.width * grid.height;
  const idx = row * grid.width + col;
  const red = grid.values[idx];
  const nir = grid.values[3 * plane + idx];
  const den = nir + red;
  return den === 0 ? 0 : (nir - red) / den;
}
