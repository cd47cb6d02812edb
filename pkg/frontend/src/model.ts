/**
 * Feature models: anything that maps an image batch to pooled embeddings.
 *
 * `loadLocalModel` serves real pretrained networks exported as a tfjs
 * layers-model directory (resnet152 converted via tensorflowjs_converter is
 * the intended default). `buildTestModel` is a small frozen convnet with
 * seed-derived weights, used for smoke runs and tests where no pretrained
 * weights are available.
 */

import * as tf from '@tensorflow/tfjs'
import { existsSync, readFileSync } from 'fs'
import { join } from 'path'

export interface FeatureModel {
  name: string
  inputSize: number
  width: number
  embed(images: tf.Tensor4D): tf.Tensor2D
}

/** Deterministic PRNG so test-model weights are identical across runs. */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a |= 0
    a = (a + 0x6d2b79f5) | 0
    let t = Math.imul(a ^ (a >>> 15), 1 | a)
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

function frozenTensor(rand: () => number, shape: number[], scale: number): tf.Tensor {
  const size = shape.reduce((a, b) => a * b, 1)
  const values = new Float32Array(size)
  for (let i = 0; i < size; i++) values[i] = (rand() * 2 - 1) * scale
  return tf.tensor(values, shape)
}

export function buildTestModel(seed = 7, inputSize = 32): FeatureModel {
  const rand = mulberry32(seed)
  const k1 = frozenTensor(rand, [3, 3, 3, 8], 0.4) as tf.Tensor4D
  const k2 = frozenTensor(rand, [3, 3, 8, 16], 0.3) as tf.Tensor4D
  return {
    name: `test-model-${seed}`,
    inputSize,
    width: 16,
    embed(images: tf.Tensor4D): tf.Tensor2D {
      return tf.tidy(() => {
        let x = tf.relu(tf.conv2d(images, k1, 1, 'same'))
        x = tf.maxPool(x, 2, 2, 'same')
        x = tf.relu(tf.conv2d(x, k2, 1, 'same'))
        return tf.mean(x, [1, 2]) as tf.Tensor2D
      })
    },
  }
}

interface WeightsManifestEntry {
  paths: string[]
  weights: Array<{ name: string; shape: number[]; dtype: string }>
}

/** Read a tfjs layers-model directory (model.json + weight shards). */
export async function loadLocalModel(
  dir: string,
  opts: { inputSize?: number; layer?: string } = {},
): Promise<FeatureModel> {
  const manifest = JSON.parse(readFileSync(join(dir, 'model.json'), 'utf-8'))
  const entries: WeightsManifestEntry[] = manifest.weightsManifest
  const specs = entries.flatMap((e) => e.weights)
  const shards = entries.flatMap((e) => e.paths).map((p) => readFileSync(join(dir, p)))
  const weightData = new Uint8Array(shards.reduce((a, b) => a + b.length, 0))
  let off = 0
  for (const shard of shards) {
    weightData.set(shard, off)
    off += shard.length
  }
  const model = await tf.loadLayersModel(
    tf.io.fromMemory({
      modelTopology: manifest.modelTopology,
      weightSpecs: specs,
      weightData: weightData.buffer,
    }),
  )
  const cut = opts.layer ? model.getLayer(opts.layer) : model.layers[model.layers.length - 2]
  const trunk = tf.model({ inputs: model.inputs, outputs: cut.output as tf.SymbolicTensor })
  const outShape = trunk.outputs[0].shape
  const inputSize = opts.inputSize ?? (model.inputs[0].shape[1] as number) ?? 224
  return {
    name: manifest.modelTopology?.model_config?.class_name ?? dir,
    inputSize,
    width: outShape[outShape.length - 1] as number,
    embed(images: tf.Tensor4D): tf.Tensor2D {
      return tf.tidy(() => {
        let out = trunk.predict(images) as tf.Tensor
        if (out.rank === 4) out = tf.mean(out, [1, 2]) // pool spatial maps
        return out as tf.Tensor2D
      })
    },
  }
}

const KNOWN_MODELS = ['resnet152', 'resnet50', 'mobilenet']

export async function resolveModel(spec: string, opts: { layer?: string } = {}): Promise<FeatureModel> {
  if (spec.startsWith('test-model')) {
    const seed = Number(spec.split(':')[1] ?? 7)
    return buildTestModel(seed)
  }
  let dir = spec
  if (KNOWN_MODELS.includes(spec)) {
    dir = join(process.env.PNDF_MODELS_DIR ?? 'models', spec)
    if (!existsSync(join(dir, 'model.json'))) {
      throw new Error(
        `no weights for '${spec}' at ${dir}; convert the pretrained network with ` +
          `tensorflowjs_converter and place it there (or set PNDF_MODELS_DIR)`,
      )
    }
  }
  return loadLocalModel(dir, opts)
}
