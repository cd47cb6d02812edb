/**
 * CIFAR-10 binary-format reader. Each record is 1 label byte followed by
 * 3072 bytes of channel-planar pixels (1024 R, then G, then B; 32x32
 * row-major). No image decoding is involved, so the reader is exact.
 */

import { existsSync, readFileSync } from 'fs'
import { join } from 'path'

export const CIFAR_SIZE = 32
export const RECORD_BYTES = 1 + 3 * CIFAR_SIZE * CIFAR_SIZE

export interface LabeledImages {
  count: number
  /** NHWC, values in [0, 1], length count*32*32*3 */
  pixels: Float32Array
  labels: Int32Array
}

export function cifarSplitFiles(dataDir: string, split: 'train' | 'test'): string[] {
  const names =
    split === 'train'
      ? [1, 2, 3, 4, 5].map((i) => `data_batch_${i}.bin`)
      : ['test_batch.bin']
  const paths = names.map((n) => join(dataDir, n))
  for (const p of paths) {
    if (!existsSync(p)) throw new Error(`CIFAR-10 batch file missing: ${p}`)
  }
  return paths
}

export function readCifarRecords(paths: string[], limit?: number): LabeledImages {
  const buffers = paths.map((p) => readFileSync(p))
  let total = 0
  for (const buf of buffers) {
    if (buf.length % RECORD_BYTES !== 0) {
      throw new Error(`batch size ${buf.length} is not a multiple of the ${RECORD_BYTES}-byte record`)
    }
    total += buf.length / RECORD_BYTES
  }
  const count = limit !== undefined ? Math.min(limit, total) : total
  if (count < 1) throw new Error('no records to read')
  const plane = CIFAR_SIZE * CIFAR_SIZE
  const pixels = new Float32Array(count * plane * 3)
  const labels = new Int32Array(count)
  let rec = 0
  for (const buf of buffers) {
    for (let base = 0; base < buf.length && rec < count; base += RECORD_BYTES, rec++) {
      labels[rec] = buf[base]
      for (let p = 0; p < plane; p++) {
        // planar RGB -> interleaved HWC
        const out = rec * plane * 3 + p * 3
        pixels[out] = buf[base + 1 + p] / 255
        pixels[out + 1] = buf[base + 1 + plane + p] / 255
        pixels[out + 2] = buf[base + 1 + 2 * plane + p] / 255
      }
    }
  }
  return { count, pixels, labels }
}

/** Little-endian record writer, used by tests to synthesize batch files. */
export function encodeCifarRecords(images: Uint8Array[], labels: number[]): Buffer {
  if (images.length !== labels.length) throw new Error('one label per image required')
  const buf = Buffer.alloc(images.length * RECORD_BYTES)
  images.forEach((img, i) => {
    if (img.length !== RECORD_BYTES - 1) {
      throw new Error(`image ${i} has ${img.length} bytes, expected ${RECORD_BYTES - 1}`)
    }
    buf[i * RECORD_BYTES] = labels[i]
    buf.set(img, i * RECORD_BYTES + 1)
  })
  return buf
}
