import { mkdirSync, mkdtempSync, readFileSync, writeFileSync } from 'fs'
import { tmpdir } from 'os'
import { dirname, join } from 'path'
import { fileURLToPath } from 'url'
import { describe, expect, it } from 'vitest'

import { RECORD_BYTES, cifarSplitFiles, encodeCifarRecords, readCifarRecords } from '../src/dataset.js'
import { extractFeatures } from '../src/extract.js'
import { buildTestModel, resolveModel } from '../src/model.js'
import { readFeatureFile } from '../src/pndf.js'

const HERE = dirname(fileURLToPath(import.meta.url))

/** Deterministic fake CIFAR records: smooth per-class gradients. */
function fakeRecords(count: number) {
  const images: Uint8Array[] = []
  const labels: number[] = []
  for (let i = 0; i < count; i++) {
    const img = new Uint8Array(RECORD_BYTES - 1)
    for (let p = 0; p < img.length; p++) {
      img[p] = (i * 37 + p * 13) % 256
    }
    images.push(img)
    labels.push(i % 10)
  }
  return { images, labels }
}

function writeFakeBatch(dir: string, name: string, count: number) {
  const { images, labels } = fakeRecords(count)
  writeFileSync(join(dir, name), encodeCifarRecords(images, labels))
  return labels
}

describe('cifar reader', () => {
  it('decodes planar records to HWC in [0,1]', () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    writeFakeBatch(dir, 'test_batch.bin', 3)
    const records = readCifarRecords(cifarSplitFiles(dir, 'test'))
    expect(records.count).toBe(3)
    expect(records.pixels.length).toBe(3 * 32 * 32 * 3)
    // red channel of pixel 0, image 0 is record byte 1 = (0*37 + 0*13 + 13*... ) pattern
    expect(records.pixels[0]).toBeCloseTo(((0 * 37 + 0 * 13) % 256) / 255, 6)
    expect(Math.max(...records.pixels)).toBeLessThanOrEqual(1)
  })

  it('respects the record limit and rejects partial files', () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    writeFakeBatch(dir, 'test_batch.bin', 5)
    expect(readCifarRecords(cifarSplitFiles(dir, 'test'), 2).count).toBe(2)
    writeFileSync(join(dir, 'test_batch.bin'), Buffer.alloc(RECORD_BYTES + 1))
    expect(() => readCifarRecords(cifarSplitFiles(dir, 'test'))).toThrow(/record/)
  })

  it('demands all five train batches', () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    writeFakeBatch(dir, 'data_batch_1.bin', 1)
    expect(() => cifarSplitFiles(dir, 'train')).toThrow(/missing/)
  })
})

describe('test model', () => {
  it('is deterministic for a fixed seed', async () => {
    const a = buildTestModel(7)
    const b = buildTestModel(7)
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    writeFakeBatch(dir, 'test_batch.bin', 2)
    const records = readCifarRecords(cifarSplitFiles(dir, 'test'))
    const out = join(dir, 'a.pndf')
    const out2 = join(dir, 'b.pndf')
    await extractFeatures(records, a, out)
    await extractFeatures(records, b, out2)
    expect(readFileSync(out).equals(readFileSync(out2))).toBe(true)
  })

  it('resolves by spec string', async () => {
    const m = await resolveModel('test-model:3')
    expect(m.name).toBe('test-model-3')
    expect(m.width).toBe(16)
  })

  it('explains missing pretrained weights', async () => {
    await expect(resolveModel('resnet152')).rejects.toThrow(/no weights for 'resnet152'/)
  })
})

describe('extraction', () => {
  it('writes n x width features with labels and a sidecar', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    const labels = writeFakeBatch(dir, 'test_batch.bin', 10)
    const records = readCifarRecords(cifarSplitFiles(dir, 'test'))
    const model = buildTestModel(7)
    const out = join(dir, 'features.pndf')
    const result = await extractFeatures(records, model, out, 4)
    expect(result.n).toBe(10)
    expect(result.d).toBe(model.width)
    const back = readFeatureFile(out)
    expect(back.n).toBe(10)
    expect(back.d).toBe(16)
    expect(Array.from(back.labels!)).toEqual(labels)
    for (const v of back.data) expect(Number.isFinite(v)).toBe(true)
    const sidecar = readFileSync(result.sidecarPath, 'utf-8')
    expect(sidecar).toContain('resize: bilinear')
    expect(sidecar).toContain('model: test-model-7')
  })

  it('is invariant to batch size', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    writeFakeBatch(dir, 'test_batch.bin', 6)
    const records = readCifarRecords(cifarSplitFiles(dir, 'test'))
    const model = buildTestModel(7)
    const a = join(dir, 'a.pndf')
    const b = join(dir, 'b.pndf')
    await extractFeatures(records, model, a, 2)
    await extractFeatures(records, model, b, 6)
    const fa = readFeatureFile(a)
    const fb = readFeatureFile(b)
    for (let i = 0; i < fa.data.length; i++) {
      expect(Math.abs(fa.data[i] - fb.data[i])).toBeLessThan(1e-5)
    }
  })

  it('produces the smoke fixture consumed by the engine test suite', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'cifar-'))
    writeFakeBatch(dir, 'test_batch.bin', 10)
    const records = readCifarRecords(cifarSplitFiles(dir, 'test'))
    const fixtureDir = join(HERE, '..', 'fixtures')
    mkdirSync(fixtureDir, { recursive: true })
    const out = join(fixtureDir, 'smoke.pndf')
    const result = await extractFeatures(records, buildTestModel(7), out)
    expect(result.n).toBe(10)
    const back = readFeatureFile(out)
    expect(back.labels).toBeDefined()
  })
})
