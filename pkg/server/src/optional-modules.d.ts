// Optional checkpoint-loader dependency, resolved at runtime only.
declare module "@huggingface/transformers";
