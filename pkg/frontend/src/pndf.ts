/**
 * The engine's binary feature-file format (little-endian):
 *
 *   bytes 0-3   magic "PNDF"
 *   bytes 4-7   version, u32 (= 1)
 *   bytes 8-15  n, u64
 *   bytes 16-23 d, u64
 *   byte  24    flags, u8 (bit 0: label section present)
 *   then        n*d float32 values, row-major
 *   then        n int32 labels, only if flagged
 */

import { readFileSync, writeFileSync } from 'fs'

export const MAGIC = 'PNDF'
export const VERSION = 1
export const HEADER_BYTES = 25

export interface FeatureMatrix {
  n: number
  d: number
  data: Float32Array // row-major, length n*d
  labels?: Int32Array
}

export function encodeFeatureFile(m: FeatureMatrix): Buffer {
  if (m.n < 1 || m.d < 1) {
    throw new Error(`feature matrix must have n,d >= 1, got ${m.n}x${m.d}`)
  }
  if (m.data.length !== m.n * m.d) {
    throw new Error(`payload length ${m.data.length} != n*d = ${m.n * m.d}`)
  }
  if (m.labels && m.labels.length !== m.n) {
    throw new Error(`label count ${m.labels.length} != n = ${m.n}`)
  }
  for (const v of m.data) {
    if (!Number.isFinite(v)) throw new Error('payload contains non-finite values')
  }
  const size = HEADER_BYTES + 4 * m.n * m.d + (m.labels ? 4 * m.n : 0)
  const buf = Buffer.alloc(size)
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt32LE(VERSION, 4)
  buf.writeBigUInt64LE(BigInt(m.n), 8)
  buf.writeBigUInt64LE(BigInt(m.d), 16)
  buf.writeUInt8(m.labels ? 1 : 0, 24)
  let off = HEADER_BYTES
  for (const v of m.data) {
    buf.writeFloatLE(v, off)
    off += 4
  }
  if (m.labels) {
    for (const l of m.labels) {
      buf.writeInt32LE(l, off)
      off += 4
    }
  }
  return buf
}

export function writeFeatureFile(m: FeatureMatrix, path: string): void {
  writeFileSync(path, encodeFeatureFile(m))
}

export function decodeFeatureFile(buf: Buffer): FeatureMatrix {
  if (buf.length < HEADER_BYTES) throw new Error('file too small to hold a header')
  if (buf.toString('ascii', 0, 4) !== MAGIC) {
    throw new Error(`bad magic ${buf.toString('ascii', 0, 4)}, expected ${MAGIC}`)
  }
  const version = buf.readUInt32LE(4)
  if (version !== VERSION) throw new Error(`unsupported version ${version}`)
  const n = Number(buf.readBigUInt64LE(8))
  const d = Number(buf.readBigUInt64LE(16))
  if (n < 1 || d < 1) throw new Error(`declared shape ${n}x${d} is empty`)
  const flags = buf.readUInt8(24)
  const want = HEADER_BYTES + 4 * n * d + (flags & 1 ? 4 * n : 0)
  if (buf.length < want) {
    throw new Error(`payload truncated (${buf.length} bytes, expected ${want})`)
  }
  const data = new Float32Array(n * d)
  for (let i = 0; i < n * d; i++) {
    data[i] = buf.readFloatLE(HEADER_BYTES + 4 * i)
    if (!Number.isFinite(data[i])) throw new Error('payload contains non-finite values')
  }
  let labels: Int32Array | undefined
  if (flags & 1) {
    labels = new Int32Array(n)
    const base = HEADER_BYTES + 4 * n * d
    for (let i = 0; i < n; i++) labels[i] = buf.readInt32LE(base + 4 * i)
  }
  return { n, d, data, labels }
}

export function readFeatureFile(path: string): FeatureMatrix {
  return decodeFeatureFile(readFileSync(path))
}
