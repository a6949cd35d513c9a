"""Shared fixtures: random distributions, synthetic traces, and a stub
logprob server used to exercise the remote client."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from forkdecode.distributions import TokenDistribution, Vocab, normalize_logits
from forkdecode.gated_decoder import (
    DecoderParams,
    RolloutTrace,
    StepRecord,
    window_mean,
)


def random_distribution(rng: np.random.Generator, size: int) -> TokenDistribution:
    return normalize_logits(rng.normal(0.0, 3.0, size=size), Vocab(size))


def make_trace(
    scores,
    *,
    entropies=None,
    gates=None,
    texts=None,
    prompt_id="p0",
    sample_index=0,
    decoder_kind="base_only",
    window=64,
    tau=None,
    lam=None,
    metric="ce",
) -> RolloutTrace:
    """Assemble a structurally valid trace around a given score sequence."""
    scores = list(scores)
    n = len(scores)
    entropies = list(entropies) if entropies is not None else scores
    gates = list(gates) if gates is not None else [False] * n
    texts = list(texts) if texts is not None else [None] * n
    steps = []
    for i in range(n):
        recent = scores[max(0, i - window):i][::-1]
        steps.append(
            StepRecord(
                t=i + 1,
                token=i,
                score=float(scores[i]),
                base_entropy=float(entropies[i]),
                window_mean=window_mean(recent, window),
                gate=gates[i],
                chosen_from="guide" if gates[i] else "base",
                text=texts[i],
            )
        )
    return RolloutTrace(
        prompt_id=prompt_id,
        sample_index=sample_index,
        decoder_kind=decoder_kind,
        terminated_by="eos",
        realized_rate=sum(gates) / n,
        steps=tuple(steps),
        decoder=DecoderParams(metric=metric, window=window, tau=tau, lam=lam),
    )


class _StubHandler(BaseHTTPRequestHandler):
    """Minimal wire-protocol server over an in-memory row table."""

    server_version = "stub/0"

    def log_message(self, *args):
        pass

    def _send(self, code: int, doc: dict) -> None:
        body = json.dumps(doc).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        cfg = self.server.model_cfg
        if self.path == "/v1/health":
            self._send(200, {"status": "ok"})
        elif self.path == "/v1/model":
            self._send(200, {"name": cfg["name"], "vocab_size": cfg["vocab_size"]})
        else:
            self._send(404, {"error": "no such route"})

    def do_POST(self):
        cfg = self.server.model_cfg
        if self.path != "/v1/logprobs":
            self._send(404, {"error": "no such route"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            doc = json.loads(self.rfile.read(length))
            tokens = doc["tokens"]
            assert isinstance(tokens, list) and tokens
        except Exception:
            self._send(400, {"error": "malformed body"})
            return
        v = cfg["vocab_size"]
        if any(not isinstance(t, int) or not 0 <= t < v for t in tokens):
            self._send(400, {"error": "token id out of range"})
            return
        probs = None
        for k in range(min(len(tokens), cfg["max_suffix"]), 0, -1):
            probs = cfg["rows"].get(tuple(tokens[-k:]))
            if probs is not None:
                break
        if probs is None:
            probs = cfg["default"]
        logprobs = [float(np.log(p)) if p > 0 else -1e4 for p in probs]
        self._send(200, {"logprobs": logprobs})


@pytest.fixture
def stub_server():
    """Start a protocol stub; yields a factory(rows, default, vocab_size) -> url."""
    servers = []

    def start(rows: dict, default, vocab_size: int, name: str = "stub") -> str:
        server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
        server.model_cfg = {
            "rows": {tuple(k): list(v) for k, v in rows.items()},
            "default": list(default) if default is not None else None,
            "vocab_size": vocab_size,
            "name": name,
            "max_suffix": max((len(k) for k in rows), default=0),
        }
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_address[1]}"

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()
