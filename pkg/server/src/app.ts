import express, { Express, Request, Response } from "express";

import { ModelBackend } from "./backend.js";

/** Wire the protocol routes over one backend. Responses depend only on the
 * request body, never on server state. */
export function createApp(backend: ModelBackend): Express {
  const app = express();
  app.use(express.json({ limit: "16mb" }));

  app.get("/v1/health", (_req: Request, res: Response) => {
    res.status(200).json({ status: "ok" });
  });

  app.get("/v1/model", (_req: Request, res: Response) => {
    res.status(200).json({ name: backend.name, vocab_size: backend.vocabSize });
  });

  app.post("/v1/logprobs", (req: Request, res: Response) => {
    const tokens = (req.body ?? {}).tokens;
    if (!Array.isArray(tokens) || tokens.length === 0) {
      res.status(400).json({ error: "body must be {\"tokens\": [<int>...]} with at least one token" });
      return;
    }
    const bad = tokens.find(
      (t) => !Number.isInteger(t) || t < 0 || t >= backend.vocabSize,
    );
    if (bad !== undefined) {
      res.status(400).json({ error: `token id ${bad} out of range [0, ${backend.vocabSize})` });
      return;
    }
    backend
      .logprobs(tokens as number[])
      .then((logprobs) => {
        if (logprobs.length !== backend.vocabSize) {
          res.status(500).json({ error: "backend returned a wrong-sized vector" });
          return;
        }
        res.status(200).json({ logprobs });
      })
      .catch((err) => {
        res.status(500).json({ error: String(err?.message ?? err) });
      });
  });

  // Malformed JSON bodies land here via express.json().
  app.use((err: Error, _req: Request, res: Response, next: (e?: Error) => void) => {
    if (res.headersSent) {
      next(err);
      return;
    }
    res.status(400).json({ error: `malformed request: ${err.message}` });
  });

  return app;
}
