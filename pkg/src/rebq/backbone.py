"""Frozen multimodal transformer encoder with prompt-injection hooks.

The backbone consumes concatenated text token embeddings and image patch
embeddings plus special cls tokens and emits a same-length output sequence
(attention-prefix injection never changes sequence length; input-append
lengthens it by exactly the prompt length). A desk-scale pretraining
routine trains the encoder on synthetic modality-complete data until the
joint cls token classifies held-out samples, then freezes every parameter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialize
from . import tensor as T
from .bench import CorpusMeta, Sample
from .tensor import AdamW, Tensor


@dataclass
class BackboneConfig:
    embed_dim: int = 64        # D
    num_layers: int = 4        # L
    num_heads: int = 4         # H
    text_vocab_size: int = 512
    max_text_len: int = 16     # P
    num_patches: int = 16      # Q
    patch_dim: int = 16
    pretrain_classes: int = 10
    ffn_mult: int = 2
    activation: str = "relu"   # relu | gelu

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.max_text_len < 1 or self.num_patches < 1:
            raise ValueError("max_text_len and num_patches must be >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class PromptInjection:
    """Per-forward prompt payload.

    attn holds per-layer key/value prefixes as one (B, layers, 2, N_p, D)
    tensor applied to the first num_prompted_layers transformer layers;
    input_blocks are (B, N_p, D) tensors spliced into the sequence right
    after the leading token. Either part may be absent.
    """

    attn: Tensor | None = None
    input_blocks: list[Tensor] = field(default_factory=list)
    num_prompted_layers: int = 0

    @classmethod
    def attention_prefix(cls, blocks: Tensor, num_prompted_layers: int | None = None):
        layers = blocks.shape[1] if num_prompted_layers is None else num_prompted_layers
        return cls(attn=blocks, num_prompted_layers=layers)

    @classmethod
    def input_append(cls, block: Tensor):
        return cls(input_blocks=[block])

    def merged_with(self, other: "PromptInjection") -> "PromptInjection":
        """Combine two injections; attention prefixes concatenate along N_p."""
        attn = self.attn
        layers = self.num_prompted_layers
        if other.attn is not None:
            if attn is None:
                attn, layers = other.attn, other.num_prompted_layers
            else:
                if other.attn.shape[1] != attn.shape[1]:
                    raise T.ShapeError("cannot merge prefixes with differing layer counts")
                attn = T.concat([attn, other.attn], axis=3)
                layers = max(layers, other.num_prompted_layers)
        return PromptInjection(attn=attn,
                               input_blocks=self.input_blocks + other.input_blocks,
                               num_prompted_layers=layers)

    @property
    def extra_length(self) -> int:
        return sum(b.shape[1] for b in self.input_blocks)


@dataclass
class EmbeddedBatch:
    text: Tensor    # (B, P, D)
    visual: Tensor  # (B, Q, D)

    @property
    def batch(self) -> int:
        return self.text.shape[0]


# Position map for the unified query/classification layout
# [x_cls, x_cls_t, X_text, x_cls_v, X_visual].
def unified_positions(cfg: BackboneConfig) -> dict[str, int]:
    return {"joint": 0, "text_cls": 1, "visual_cls": 2 + cfg.max_text_len}


class MultimodalBackbone:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.frozen = False
        c = config
        d = c.embed_dim
        f = c.ffn_mult * d
        p: dict[str, Tensor] = {}
        p["token_emb"] = T.normal_init(rng, (c.text_vocab_size, d))
        p["patch_w"] = T.normal_init(rng, (c.patch_dim, d))
        p["patch_b"] = T.zeros(d, trainable=True)
        p["text_pos"] = T.normal_init(rng, (c.max_text_len, d))
        p["vis_pos"] = T.normal_init(rng, (c.num_patches, d))
        p["text_type"] = T.normal_init(rng, (d,))
        p["vis_type"] = T.normal_init(rng, (d,))
        p["cls"] = T.normal_init(rng, (d,))
        p["cls_t"] = T.normal_init(rng, (d,))
        p["cls_v"] = T.normal_init(rng, (d,))
        for l in range(c.num_layers):
            p[f"l{l}.ln1_g"] = T.ones(d, trainable=True)
            p[f"l{l}.ln1_b"] = T.zeros(d, trainable=True)
            p[f"l{l}.qkv_w"] = T.normal_init(rng, (d, 3 * d))
            p[f"l{l}.qkv_b"] = T.zeros(3 * d, trainable=True)
            p[f"l{l}.out_w"] = T.normal_init(rng, (d, d))
            p[f"l{l}.out_b"] = T.zeros(d, trainable=True)
            p[f"l{l}.ln2_g"] = T.ones(d, trainable=True)
            p[f"l{l}.ln2_b"] = T.zeros(d, trainable=True)
            p[f"l{l}.ff1_w"] = T.normal_init(rng, (d, f))
            p[f"l{l}.ff1_b"] = T.zeros(f, trainable=True)
            p[f"l{l}.ff2_w"] = T.normal_init(rng, (f, d))
            p[f"l{l}.ff2_b"] = T.zeros(d, trainable=True)
        p["lnf_g"] = T.ones(d, trainable=True)
        p["lnf_b"] = T.zeros(d, trainable=True)
        self.params = p

    # -- parameter management --------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def freeze(self):
        for t in self.params.values():
            t.trainable = False
            t.grad = None
        self.frozen = True

    def parameter_bytes(self) -> bytes:
        return b"".join(self.params[k].data.tobytes() for k in sorted(self.params))

    # -- embedding ----------------------------------------------------------------

    def embed_batch(self, samples: list[Sample]) -> EmbeddedBatch:
        """Token/patch embeddings plus positional and modality-type terms."""
        c = self.config
        ids = np.zeros((len(samples), c.max_text_len), dtype=np.int64)
        for i, s in enumerate(samples):
            toks = s.text_tokens
            if len(toks) > c.max_text_len:
                raise ValueError(f"sample {s.id}: text longer than {c.max_text_len}")
            if toks:
                arr = np.asarray(toks, dtype=np.int64)
                if arr.min() < 0 or arr.max() >= c.text_vocab_size:
                    raise ValueError(f"sample {s.id}: token id out of range")
                ids[i, :len(toks)] = arr
        text = T.embedding(self.params["token_emb"], ids)
        text = T.add(T.add(text, self.params["text_pos"]), self.params["text_type"])

        patches = np.stack([np.asarray(s.patches, dtype=np.float64) for s in samples])
        if patches.shape[1:] != (c.num_patches, c.patch_dim):
            raise ValueError(
                f"patches must be ({c.num_patches}, {c.patch_dim}), got {patches.shape[1:]}")
        vis = T.affine(Tensor(patches), self.params["patch_w"], self.params["patch_b"])
        vis = T.add(T.add(vis, self.params["vis_pos"]), self.params["vis_type"])
        return EmbeddedBatch(text=text, visual=vis)

    def embed(self, sample: Sample) -> EmbeddedBatch:
        return self.embed_batch([sample])

    def _cls_row(self, name: str, batch: int) -> Tensor:
        d = self.config.embed_dim
        vec = self.params[name]
        if name == "cls_t":
            vec = T.add(vec, self.params["text_type"])
        elif name == "cls_v":
            vec = T.add(vec, self.params["vis_type"])
        return T.broadcast_to(T.reshape(vec, (1, 1, d)), (batch, 1, d))

    def unified_segments(self, emb: EmbeddedBatch) -> list[Tensor]:
        b = emb.batch
        return [self._cls_row("cls", b), self._cls_row("cls_t", b), emb.text,
                self._cls_row("cls_v", b), emb.visual]

    def recon_segments(self, emb: EmbeddedBatch) -> list[Tensor]:
        return [self._cls_row("cls", emb.batch), emb.text, emb.visual]

    # -- transformer ------------------------------------------------------------------

    def _attention(self, x: Tensor, l: int, prefix) -> Tensor:
        c = self.config
        b, s, d = x.shape
        h, dh = c.num_heads, c.embed_dim // c.num_heads
        qkv = T.affine(x, self.params[f"l{l}.qkv_w"], self.params[f"l{l}.qkv_b"])
        q, k, v = qkv[:, :, :d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:]
        if prefix is not None:
            kp, vp = prefix
            k = T.concat([kp, k], axis=1)
            v = T.concat([vp, v], axis=1)
        skv = k.shape[1]
        q = T.transpose(T.reshape(q, (b, s, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (b, skv, h, dh)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(v, (b, skv, h, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = T.softmax_rows(scores)
        out = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
        out = T.reshape(out, (b, s, d))
        return T.affine(out, self.params[f"l{l}.out_w"], self.params[f"l{l}.out_b"])

    def _ffn(self, x: Tensor, l: int) -> Tensor:
        act = T.relu if self.config.activation == "relu" else T.gelu
        h = act(T.affine(x, self.params[f"l{l}.ff1_w"], self.params[f"l{l}.ff1_b"]))
        return T.affine(h, self.params[f"l{l}.ff2_w"], self.params[f"l{l}.ff2_b"])

    def forward(self, segments: list[Tensor], injection: PromptInjection | None = None) -> Tensor:
        """Pre-norm transformer over the concatenated segments.

        Attention prefixes extend only keys and values, so the output keeps
        the input length; input-append blocks are spliced after the leading
        token and lengthen the output by exactly their prompt length.
        """
        c = self.config
        d = c.embed_dim
        for seg in segments:
            if seg.shape[-1] != d:
                raise T.ShapeError(f"segment width {seg.shape[-1]} != embed dim {d}")
        x = T.concat(segments, axis=1) if len(segments) > 1 else segments[0]
        prompted = 0
        attn_blocks = None
        if injection is not None:
            if injection.num_prompted_layers > c.num_layers:
                raise ValueError(
                    f"injection prompts {injection.num_prompted_layers} layers, "
                    f"backbone has {c.num_layers}")
            if injection.input_blocks:
                lead, rest = x[:, :1], x[:, 1:]
                x = T.concat([lead, *injection.input_blocks, rest], axis=1)
            if injection.attn is not None:
                attn_blocks = injection.attn
                prompted = min(injection.num_prompted_layers, attn_blocks.shape[1])
        for l in range(c.num_layers):
            prefix = None
            if l < prompted and attn_blocks is not None:
                prefix = (attn_blocks[:, l, 0], attn_blocks[:, l, 1])
            x = T.add(x, self._attention(
                T.layer_norm(x, self.params[f"l{l}.ln1_g"], self.params[f"l{l}.ln1_b"]),
                l, prefix))
            x = T.add(x, self._ffn(
                T.layer_norm(x, self.params[f"l{l}.ln2_g"], self.params[f"l{l}.ln2_b"]), l))
        return T.layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])

    # -- checkpointing -------------------------------------------------------------------

    def save_checkpoint(self, path, extra_meta: dict | None = None):
        meta = {"config": asdict(self.config), "frozen": self.frozen}
        if extra_meta:
            meta.update(extra_meta)
        serialize.save_container(path, "backbone", meta,
                                 {k: v.data for k, v in self.params.items()})

    @classmethod
    def load_checkpoint(cls, path) -> tuple["MultimodalBackbone", dict]:
        kind, meta, arrays = serialize.load_container(path)
        if kind != "backbone":
            raise serialize.ContainerError(f"{path}: container holds {kind!r}, not a backbone")
        config = BackboneConfig(**meta["config"])
        model = cls(config, np.random.default_rng(0))
        for name, t in model.params.items():
            t.data = arrays[name]
        if meta.get("frozen"):
            model.freeze()
        return model, meta


# -- pretraining ----------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-4
    warmup_frac: float = 0.1
    holdout_frac: float = 0.1
    eval_every: int = 100
    target_accuracy: float = 0.9
    min_accuracy: float = 0.6


@dataclass
class PretrainReport:
    accuracy: float
    steps_used: int
    usable: bool
    losses: list[float] = field(default_factory=list)


def pretrain(config: BackboneConfig, corpus: tuple[CorpusMeta, list[Sample]], seed: int,
             pcfg: PretrainConfig | None = None) -> tuple[MultimodalBackbone, PretrainReport]:
    """Train the encoder to classify the joint cls token, then freeze it.

    Stops early once held-out accuracy reaches the target; a run that ends
    below the minimum accuracy is flagged unusable.
    """
    pcfg = pcfg or PretrainConfig()
    meta, samples = corpus
    if meta.num_classes != config.pretrain_classes:
        raise ValueError(
            f"corpus has {meta.num_classes} classes, config expects {config.pretrain_classes}")
    for s in samples:
        if s.missing_type != "complete":
            raise ValueError("pretraining corpus must be modality-complete")

    rng = np.random.default_rng(seed)
    model = MultimodalBackbone(config, rng)
    d, classes = config.embed_dim, config.pretrain_classes
    head_w = T.normal_init(rng, (d, classes))
    head_b = T.zeros(classes, trainable=True)

    order = rng.permutation(len(samples))
    n_hold = max(1, int(round(pcfg.holdout_frac * len(samples))))
    hold = [samples[i] for i in order[:n_hold]]
    train = [samples[i] for i in order[n_hold:]]

    params = list(model.params.values()) + [head_w, head_b]
    opt = AdamW(params, base_lr=pcfg.lr, total_steps=pcfg.steps,
                warmup_frac=pcfg.warmup_frac, weight_decay=0.01)

    def logits_for(batch: list[Sample]) -> Tensor:
        emb = model.embed_batch(batch)
        out = model.forward(model.unified_segments(emb))
        return T.affine(out[:, 0], head_w, head_b)

    def holdout_accuracy() -> float:
        correct = 0
        with T.no_grad():
            for start in range(0, len(hold), 64):
                chunk = hold[start:start + 64]
                preds = logits_for(chunk).data.argmax(axis=1)
                correct += sum(int(p) == s.label for p, s in zip(preds, chunk))
        return correct / len(hold)

    losses: list[float] = []
    accuracy = 0.0
    steps_used = 0
    for step in range(pcfg.steps):
        idx = rng.integers(0, len(train), size=pcfg.batch_size)
        batch = [train[i] for i in idx]
        target = Tensor(T.one_hot([s.label for s in batch], classes))
        loss = T.cross_entropy(logits_for(batch), target)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        steps_used = step + 1
        if steps_used % pcfg.eval_every == 0 or steps_used == pcfg.steps:
            accuracy = holdout_accuracy()
            if accuracy >= pcfg.target_accuracy:
                break
    model.freeze()
    report = PretrainReport(accuracy=accuracy, steps_used=steps_used,
                            usable=accuracy >= pcfg.min_accuracy, losses=losses)
    return model, report
