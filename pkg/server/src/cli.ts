#!/usr/bin/env node
import { createApp } from "./app.js";
import { BackendError, ModelBackend } from "./backend.js";
import { loadCheckpointBackend } from "./ckpt.js";
import { TableBackend } from "./table.js";

const USAGE =
  "usage: logits-server serve --source table:<path>|ckpt:<dir> [--host <host>] [--port <port>]";

interface Args {
  source: string;
  host: string;
  port: number;
}

function parseArgs(argv: string[]): Args {
  if (argv[0] !== "serve") {
    throw new BackendError(USAGE);
  }
  const args: Args = { source: "", host: "127.0.0.1", port: 8080 };
  for (let i = 1; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (value === undefined) {
      throw new BackendError(`missing value for ${flag}\n${USAGE}`);
    }
    if (flag === "--source") {
      args.source = value;
    } else if (flag === "--host") {
      args.host = value;
    } else if (flag === "--port") {
      args.port = Number(value);
      if (!Number.isInteger(args.port) || args.port < 0 || args.port > 65535) {
        throw new BackendError(`bad port ${value}`);
      }
    } else {
      throw new BackendError(`unknown flag ${flag}\n${USAGE}`);
    }
  }
  if (!args.source) {
    throw new BackendError(`--source is required\n${USAGE}`);
  }
  return args;
}

async function loadBackend(source: string): Promise<ModelBackend> {
  const sep = source.indexOf(":");
  const kind = sep < 0 ? source : source.slice(0, sep);
  const rest = sep < 0 ? "" : source.slice(sep + 1);
  if (!rest) {
    throw new BackendError(`bad --source ${source}\n${USAGE}`);
  }
  if (kind === "table") {
    return TableBackend.fromFile(rest);
  }
  if (kind === "ckpt") {
    return loadCheckpointBackend(rest);
  }
  throw new BackendError(`unknown source kind '${kind}'\n${USAGE}`);
}

async function main(): Promise<void> {
  const args = parseArgs(process.argv.slice(2));
  const backend = await loadBackend(args.source);
  const app = createApp(backend);
  const server = app.listen(args.port, args.host, () => {
    const addr = server.address();
    const port = typeof addr === "object" && addr ? addr.port : args.port;
    // Machine-readable startup line so launchers can grab the bound port.
    console.log(
      JSON.stringify({ listening: true, host: args.host, port, model: backend.name, vocab_size: backend.vocabSize }),
    );
  });
  const stop = () => server.close(() => process.exit(0));
  process.on("SIGINT", stop);
  process.on("SIGTERM", stop);
}

main().catch((err) => {
  console.error(String(err?.message ?? err));
  process.exit(1);
});
