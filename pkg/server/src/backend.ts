/** A served model: reports its vocabulary size once and answers full
 * next-token logprob vectors for a token-id context. Vectors may be
 * un-normalized (clients log-softmax); length must equal vocabSize. */
export interface ModelBackend {
  name: string;
  vocabSize: number;
  logprobs(tokens: number[]): Promise<number[]>;
}

export class BackendError extends Error {}
