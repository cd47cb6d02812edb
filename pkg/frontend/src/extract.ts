/**
 * Batched feature extraction: images -> resize -> normalize -> pooled
 * embeddings -> binary feature file with labels, plus a sidecar text file
 * recording the preprocessing so runs are reproducible.
 */

import * as tf from '@tensorflow/tfjs'
import { writeFileSync } from 'fs'

import { CIFAR_SIZE, LabeledImages } from './dataset.js'
import { FeatureModel } from './model.js'
import { writeFeatureFile } from './pndf.js'

export const CHANNEL_MEAN = [0.485, 0.456, 0.406]
export const CHANNEL_STD = [0.229, 0.224, 0.225]

export interface ExtractionResult {
  n: number
  d: number
  outPath: string
  sidecarPath: string
}

export async function extractFeatures(
  records: LabeledImages,
  model: FeatureModel,
  outPath: string,
  batchSize = 64,
): Promise<ExtractionResult> {
  const n = records.count
  const data = new Float32Array(n * model.width)
  const mean = tf.tensor1d(CHANNEL_MEAN)
  const std = tf.tensor1d(CHANNEL_STD)
  for (let start = 0; start < n; start += batchSize) {
    const count = Math.min(batchSize, n - start)
    const slice = records.pixels.subarray(
      start * CIFAR_SIZE * CIFAR_SIZE * 3,
      (start + count) * CIFAR_SIZE * CIFAR_SIZE * 3,
    )
    const embedded = tf.tidy(() => {
      let x = tf.tensor4d(slice, [count, CIFAR_SIZE, CIFAR_SIZE, 3])
      if (model.inputSize !== CIFAR_SIZE) {
        x = tf.image.resizeBilinear(x, [model.inputSize, model.inputSize])
      }
      x = tf.div(tf.sub(x, mean), std)
      return model.embed(x as tf.Tensor4D)
    })
    data.set(await embedded.data<'float32'>(), start * model.width)
    embedded.dispose()
  }
  mean.dispose()
  std.dispose()
  writeFeatureFile({ n, d: model.width, data, labels: Int32Array.from(records.labels) }, outPath)
  const sidecarPath = `${outPath}.meta.txt`
  writeFileSync(
    sidecarPath,
    [
      `model: ${model.name}`,
      `embedding_width: ${model.width}`,
      `input_size: ${model.inputSize}`,
      'resize: bilinear',
      `normalize_mean: ${CHANNEL_MEAN.join(',')}`,
      `normalize_std: ${CHANNEL_STD.join(',')}`,
      `samples: ${n}`,
      '',
    ].join('\n'),
  )
  return { n, d: model.width, outPath, sidecarPath }
}
