#!/usr/bin/env node
import yargs from 'yargs'
import { hideBin } from 'yargs/helpers'

import { cifarSplitFiles, readCifarRecords } from './dataset.js'
import { extractFeatures } from './extract.js'
import { resolveModel } from './model.js'

yargs(hideBin(process.argv))
  .command(
    'extract',
    'Extract pooled embeddings from an image dataset into a feature file',
    (y) =>
      y
        .option('dataset', { choices: ['cifar10'] as const, default: 'cifar10' })
        .option('split', { choices: ['train', 'test'] as const, default: 'train' })
        .option('data-dir', { type: 'string', demandOption: true, describe: 'Directory of CIFAR-10 binary batches' })
        .option('out', { type: 'string', demandOption: true, describe: 'Output feature file' })
        .option('model', {
          type: 'string',
          default: 'resnet152',
          describe: "tfjs layers-model directory, or 'test-model[:seed]' for the frozen smoke net",
        })
        .option('layer', { type: 'string', describe: 'Layer to cut the pretrained model at' })
        .option('batch-size', { type: 'number', default: 64 })
        .option('limit', { type: 'number', describe: 'Extract only the first N records' }),
    async (argv) => {
      try {
        const files = cifarSplitFiles(argv.dataDir, argv.split as 'train' | 'test')
        const records = readCifarRecords(files, argv.limit)
        const model = await resolveModel(argv.model, { layer: argv.layer })
        const result = await extractFeatures(records, model, argv.out, argv.batchSize)
        console.log(`wrote ${result.n} x ${result.d} features to ${result.outPath}`)
        console.log(`preprocessing recorded in ${result.sidecarPath}`)
      } catch (err) {
        console.error(err instanceof Error ? err.message : String(err))
        process.exit(1)
      }
    },
  )
  .demandCommand(1)
  .strict()
  .fail((msg, err) => {
    console.error(msg ?? err?.message ?? 'extraction failed')
    process.exit(1)
  })
  .parse()
