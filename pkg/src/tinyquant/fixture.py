"""Pinned fixture generation: synthetic corpus and trained toy checkpoints.

The corpus is byte-level English-like text from a seeded template grammar, so
a small decoder learns confident next-byte predictions quickly.  Training uses
torch (the only place it is imported) with a module that mirrors the numpy
architecture one to one; the result is exported to the checkpoint format.
Everything is a pure function of the seed, so regeneration is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tinyquant.checkpoint import atomic_write_bytes, checkpoint_bytes, save_checkpoint
from tinyquant.model import (
    AttentionParams,
    MlpParams,
    Model,
    ModelConfig,
    TransformerBlockParams,
)

TARGET_CONFIG = ModelConfig(n_blocks=6, d_model=128, n_heads=4, d_ff=512,
                            vocab_size=256, max_seq_len=256)
DRAFT_CONFIG = ModelConfig(n_blocks=2, d_model=64, n_heads=2, d_ff=256,
                           vocab_size=256, max_seq_len=256)
QUICK_CONFIG = ModelConfig(n_blocks=2, d_model=32, n_heads=2, d_ff=64,
                           vocab_size=256, max_seq_len=256)

_SUBJECTS = [
    "the robot", "a sensor", "the compiler", "our probe", "the scheduler",
    "a tiny model", "the decoder", "this kernel", "the cache", "a worker",
    "the planner", "an encoder", "the driver", "a packet", "the monitor",
]
_VERBS = [
    "reads", "writes", "compresses", "quantizes", "verifies", "decodes",
    "measures", "routes", "caches", "prunes", "samples", "loads", "stores",
    "checks", "updates",
]
_OBJECTS = [
    "the signal", "a small block", "the weight matrix", "every token",
    "the activation", "a long sequence", "the shared buffer", "this layer",
    "the lookup table", "a sparse row", "the byte stream", "the channel",
]
_PLACES = [
    "in the pipeline", "on the device", "under a tight budget", "at runtime",
    "before the next step", "after calibration", "in local memory",
    "without extra cost", "during the scan", "within one pass",
]
_CONNECTORS = ["then", "and", "so", "meanwhile", "afterwards", "next"]


def _zipf_pick(rng: np.random.Generator, n: int, s: float = 2.2) -> int:
    """Weighted index draw; heavy bias toward the first entries keeps the
    corpus predictable enough for a confident toy model."""
    w = 1.0 / np.arange(1, n + 1) ** s
    return int(rng.choice(n, p=w / w.sum()))


def generate_corpus_text(seed: int, size_bytes: int = 220_000) -> str:
    """Deterministic template-grammar text of roughly ``size_bytes`` bytes.

    Word choices are Zipf-weighted and chained (the subject biases the verb,
    the verb the object, ...), so next-byte distributions stay peaked even at
    choice points; a confident trained model is what the integer-vs-float
    agreement suites rely on.
    """
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    total = 0
    while total < size_bytes:
        si = _zipf_pick(rng, len(_SUBJECTS))
        vi = (si * 3 + _zipf_pick(rng, 4)) % len(_VERBS)
        oi = (vi * 2 + _zipf_pick(rng, 3)) % len(_OBJECTS)
        pi = (si + oi + _zipf_pick(rng, 3)) % len(_PLACES)
        sentence = "{} {} {} {}.".format(
            _SUBJECTS[si], _VERBS[vi], _OBJECTS[oi], _PLACES[pi])
        if rng.random() < 0.1:
            ci = _zipf_pick(rng, len(_CONNECTORS))
            sentence += " {} it {} {}.".format(
                _CONNECTORS[ci], _VERBS[(vi + 1) % len(_VERBS)],
                _OBJECTS[(oi + 1) % len(_OBJECTS)])
        if rng.random() < 0.02:
            sentence += " step {} of {} is done.".format(
                int(rng.integers(1, 100)), int(rng.integers(100, 1000)))
        parts.append(sentence)
        total += len(sentence) + 1
        if rng.random() < 0.08:
            parts.append("\n")
    return " ".join(parts)


def _build_torch_model(config: ModelConfig):
    import torch
    import torch.nn as nn

    class Block(nn.Module):
        def __init__(self):
            super().__init__()
            d = config.d_model
            self.ln1 = nn.LayerNorm(d, eps=1e-12)
            self.wq = nn.Linear(d, d)
            self.wk = nn.Linear(d, d)
            self.wv = nn.Linear(d, d)
            self.wo = nn.Linear(d, d)
            self.ln2 = nn.LayerNorm(d, eps=1e-12)
            self.w1 = nn.Linear(d, config.d_ff)
            self.w2 = nn.Linear(config.d_ff, d)
            self.act = nn.GELU()

        def forward(self, x, mask):
            h = self.ln1(x)
            b, t, d = h.shape
            nh, dh = config.n_heads, config.d_head
            q = self.wq(h).view(b, t, nh, dh).transpose(1, 2)
            k = self.wk(h).view(b, t, nh, dh).transpose(1, 2)
            v = self.wv(h).view(b, t, nh, dh).transpose(1, 2)
            scores = q @ k.transpose(-1, -2) / (dh ** 0.5)
            scores = scores.masked_fill(mask, float("-inf"))
            probs = torch.softmax(scores, dim=-1)
            ctx = (probs @ v).transpose(1, 2).reshape(b, t, d)
            x = x + self.wo(ctx)
            x = x + self.w2(self.act(self.w1(self.ln2(x))))
            return x

    class ToyLM(nn.Module):
        def __init__(self):
            super().__init__()
            self.tok = nn.Embedding(config.vocab_size, config.d_model)
            self.pos = nn.Embedding(config.max_seq_len, config.d_model)
            self.blocks = nn.ModuleList(Block() for _ in range(config.n_blocks))
            self.ln_f = nn.LayerNorm(config.d_model, eps=1e-12)
            self.head = nn.Linear(config.d_model, config.vocab_size)
            nn.init.normal_(self.tok.weight, std=0.02)
            nn.init.normal_(self.pos.weight, std=0.01)

        def forward(self, idx):
            b, t = idx.shape
            posi = torch.arange(t, device=idx.device)
            x = self.tok(idx) + self.pos(posi)[None]
            mask = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
            for blk in self.blocks:
                x = blk(x, mask)
            return self.head(self.ln_f(x))

    return ToyLM()


def _export_numpy_model(torch_model, config: ModelConfig) -> Model:
    def arr(t):
        return t.detach().cpu().numpy().astype(np.float32).copy()

    blocks = []
    for blk in torch_model.blocks:
        blocks.append(TransformerBlockParams(
            ln1_gamma=arr(blk.ln1.weight), ln1_beta=arr(blk.ln1.bias),
            attn=AttentionParams(
                wq=arr(blk.wq.weight), bq=arr(blk.wq.bias),
                wk=arr(blk.wk.weight), bk=arr(blk.wk.bias),
                wv=arr(blk.wv.weight), bv=arr(blk.wv.bias),
                wo=arr(blk.wo.weight), bo=arr(blk.wo.bias),
            ),
            ln2_gamma=arr(blk.ln2.weight), ln2_beta=arr(blk.ln2.bias),
            mlp=MlpParams(
                w1=arr(blk.w1.weight), b1=arr(blk.w1.bias),
                w2=arr(blk.w2.weight), b2=arr(blk.w2.bias),
            ),
        ))
    return Model(
        config=config,
        tok_emb=arr(torch_model.tok.weight),
        pos_emb=arr(torch_model.pos.weight),
        blocks=blocks,
        ln_f_gamma=arr(torch_model.ln_f.weight),
        ln_f_beta=arr(torch_model.ln_f.bias),
        w_head=arr(torch_model.head.weight),
        b_head=arr(torch_model.head.bias),
    )


def train_model(
    config: ModelConfig,
    tokens: np.ndarray,
    seed: int,
    steps: int,
    batch_size: int = 12,
    seq_len: int = 128,
    lr: float = 3e-4,
) -> tuple[Model, float]:
    """Train a toy LM on the byte corpus; returns the model and final loss."""
    import torch

    torch.manual_seed(seed)
    torch.set_num_threads(1)  # keeps regeneration byte-identical
    model = _build_torch_model(config)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    rng = np.random.default_rng(seed + 1)
    data = torch.from_numpy(tokens.astype(np.int64))
    warmup = min(20, steps)
    loss_val = float("nan")
    for step in range(steps):
        starts = rng.integers(0, len(tokens) - seq_len - 1, size=batch_size)
        batch = torch.stack([data[s:s + seq_len + 1] for s in starts])
        x, y = batch[:, :-1], batch[:, 1:]
        if step < warmup:
            scale = (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            scale = 0.1 + 0.45 * (1.0 + np.cos(np.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr * scale
        logits = model(x)
        loss = torch.nn.functional.cross_entropy(
            logits.reshape(-1, config.vocab_size), y.reshape(-1))
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        loss_val = float(loss.item())
    return _export_numpy_model(model, config), loss_val


@dataclass
class FixtureSpec:
    seed: int = 1234
    corpus_bytes: int = 220_000
    target_steps: int = 600
    draft_steps: int = 250
    quick: bool = False


def make_fixture(out_dir: str | Path, spec: FixtureSpec) -> dict:
    """Generate corpus + target/draft checkpoints; returns the manifest dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    text = generate_corpus_text(spec.seed, spec.corpus_bytes)
    corpus_path = out_dir / "corpus.txt"
    atomic_write_bytes(corpus_path, text.encode("utf-8"))
    tokens = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)

    if spec.quick:
        target_cfg, draft_cfg = QUICK_CONFIG, QUICK_CONFIG
        target_steps = min(spec.target_steps, 30)
        draft_steps = min(spec.draft_steps, 15)
    else:
        target_cfg, draft_cfg = TARGET_CONFIG, DRAFT_CONFIG
        target_steps, draft_steps = spec.target_steps, spec.draft_steps

    target, target_loss = train_model(target_cfg, tokens, spec.seed,
                                      target_steps)
    draft, draft_loss = train_model(draft_cfg, tokens, spec.seed + 7,
                                    draft_steps)

    target_path = out_dir / "target.ckpt"
    draft_path = out_dir / "draft.ckpt"
    save_checkpoint(target, target_path)
    save_checkpoint(draft, draft_path)

    def sha(path: Path) -> str:
        return hashlib.sha256(path.read_bytes()).hexdigest()

    manifest = {
        "seed": spec.seed,
        "quick": spec.quick,
        "corpus": {"file": "corpus.txt", "bytes": len(text.encode("utf-8")),
                   "sha256": sha(corpus_path)},
        "target": {"file": "target.ckpt", "config": target_cfg.to_dict(),
                   "steps": target_steps, "final_loss": target_loss,
                   "sha256": sha(target_path)},
        "draft": {"file": "draft.ckpt", "config": draft_cfg.to_dict(),
                  "steps": draft_steps, "final_loss": draft_loss,
                  "sha256": sha(draft_path)},
    }
    atomic_write_bytes(
        out_dir / "manifest.json",
        json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    return manifest
