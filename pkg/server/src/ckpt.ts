import { BackendError, ModelBackend } from "./backend.js";

/** Serve raw final-layer logits from a locally available transformer
 * checkpoint. Un-normalized vectors are fine: the protocol lets the client
 * normalize, which avoids double-softmax drift.
 *
 * The loader package is imported lazily so the table backend works without
 * it; an unloadable source fails at startup with a clear message.
 */
export async function loadCheckpointBackend(dir: string): Promise<ModelBackend> {
  let hub: any;
  try {
    hub = await import("@huggingface/transformers");
  } catch {
    throw new BackendError(
      "checkpoint backend requires the '@huggingface/transformers' package " +
        "(npm install @huggingface/transformers)",
    );
  }
  let model: any;
  try {
    model = await hub.AutoModelForCausalLM.from_pretrained(dir, {
      local_files_only: true,
    });
  } catch (err) {
    throw new BackendError(`cannot load checkpoint from ${dir}: ${err}`);
  }
  const vocabSize = Number(model.config?.vocab_size);
  if (!Number.isInteger(vocabSize) || vocabSize < 2) {
    throw new BackendError(`checkpoint at ${dir} reports no usable vocab_size`);
  }

  // Inference requests are chained so the model sees one forward at a time;
  // correctness over throughput, per the serving contract.
  let inflight: Promise<unknown> = Promise.resolve();

  return {
    name: dir,
    vocabSize,
    logprobs(tokens: number[]): Promise<number[]> {
      const run = inflight.then(async () => {
        const ids = new hub.Tensor(
          "int64",
          BigInt64Array.from(tokens.map((t) => BigInt(t))),
          [1, tokens.length],
        );
        const mask = new hub.Tensor(
          "int64",
          BigInt64Array.from(tokens.map(() => 1n)),
          [1, tokens.length],
        );
        const output = await model({ input_ids: ids, attention_mask: mask });
        const logits = output.logits; // [1, seq, vocab]
        const seq = logits.dims[1];
        const vocab = logits.dims[2];
        const flat = logits.data as Float32Array;
        const start = (seq - 1) * vocab;
        return Array.from(flat.slice(start, start + vocab), Number);
      });
      inflight = run.catch(() => undefined);
      return run;
    },
  };
}
