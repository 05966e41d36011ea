"""Toy models built on the quantized linear layer, with manual backprop.

Two architectures cover the training experiments:

* :class:`MLP` — bias-free ReLU network for synthetic regression; every
  hidden linear is quantized, the output head stays binary32.
* :class:`TinyTransformer` — pre-norm causal transformer for character-level
  language modeling: learned token + position embeddings, RMSNorm, fused-QKV
  multi-head attention, SwiGLU feed-forward.  The four linears per block
  (``qkv``, ``att_out``, ``ffn1``, ``ffn2``) are quantized; embeddings,
  norms, attention score matmuls, and the output head stay binary32.

Both expose the same protocol: ``init_params(seed)``, ``quant_tags()``,
``weight_param(tag)``, ``forward_loss``, ``loss_and_grads``, ``input_acts``,
driven by a mapping ``tag -> LayerQuantConfig`` (see :func:`uniform_cfgs`).
The backward pass visits quantized layers in exactly the reverse of forward
order, so a run is replayable from the generator key alone.

Gradients follow the straight-through convention of the quantized layer:
no gradient flows into quantization scales.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Dict, Mapping, Tuple

import numpy as np

from . import fpcodec as fc
from . import qlinear as ql

__all__ = ["MLP", "TinyTransformer", "uniform_cfgs"]

F32 = np.float32

_NORM_EPS = 1e-6


def uniform_cfgs(model, base_cfg: ql.LayerQuantConfig) -> Dict[str, ql.LayerQuantConfig]:
    """One config per quantized layer, differing only in ``layer_tag`` (which
    seeds that layer's rotation signs)."""
    return {
        tag: dataclasses.replace(base_cfg, layer_tag=tag) for tag in model.quant_tags()
    }


def _check_cfgs(model, cfgs: Mapping[str, ql.LayerQuantConfig]) -> None:
    missing = [t for t in model.quant_tags() if t not in cfgs]
    if missing:
        raise ValueError(f"missing layer configs for {missing}")


def _collect_clamps(caches) -> Tuple[int, Dict[str, int]]:
    by_layer = {}
    for tag, cache in caches:
        by_layer[tag] = by_layer.get(tag, 0) + sum(cache.clamp_counts.values())
    return sum(by_layer.values()), by_layer


# ── MLP ──────────────────────────────────────────────────────────────────────


class MLP:
    """Bias-free ReLU MLP; hidden linears quantized, head binary32."""

    def __init__(self, widths: Tuple[int, ...] = (784, 256, 256, 10)):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 3:
            raise ValueError("MLP needs at least (input, hidden, output) widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"widths must be positive, got {widths}")
        self.widths = widths
        self._tags = tuple(f"fc{i}" for i in range(len(widths) - 2))

    @property
    def name(self) -> str:
        return "mlp"

    def quant_tags(self) -> Tuple[str, ...]:
        return self._tags

    def weight_param(self, tag: str) -> str:
        return f"{tag}.w"

    def init_params(self, seed: int) -> Dict[str, np.ndarray]:
        params = {}
        dims = self.widths
        for i, tag in enumerate(self._tags):
            rng = fc.stream(seed, "init", tag)
            params[f"{tag}.w"] = (
                rng.standard_normal((dims[i + 1], dims[i])) / math.sqrt(dims[i])
            ).astype(F32)
        rng = fc.stream(seed, "init", "head")
        params["head.w"] = (
            rng.standard_normal((dims[-1], dims[-2])) / math.sqrt(dims[-2])
        ).astype(F32)
        return params

    def _forward(self, params, batch, cfgs, step):
        x, y = batch
        h = np.asarray(x, dtype=F32)
        acts, caches, pre = {}, [], []
        for tag in self._tags:
            acts[tag] = h
            a, cache = ql.linear_forward(h, params[f"{tag}.w"], cfgs[tag], step=step)
            caches.append((tag, cache))
            pre.append(a)
            h = np.maximum(a, F32(0.0))
        yhat = h @ params["head.w"].T
        err = yhat - np.asarray(y, dtype=F32)
        loss = float(np.mean(err.astype(np.float64) ** 2))
        return loss, {"acts": acts, "caches": caches, "pre": pre, "h": h, "err": err}

    def forward_loss(self, params, batch, cfgs, step):
        _check_cfgs(self, cfgs)
        loss, ctx = self._forward(params, batch, cfgs, step)
        total, by_layer = _collect_clamps(ctx["caches"])
        return loss, {"clamp_events": total, "clamp_by_layer": by_layer}

    def input_acts(self, params, batch, cfgs, step):
        _check_cfgs(self, cfgs)
        _, ctx = self._forward(params, batch, cfgs, step)
        return ctx["acts"]

    def loss_and_grads(self, params, batch, cfgs, step, rng):
        _check_cfgs(self, cfgs)
        loss, ctx = self._forward(params, batch, cfgs, step)
        err, h = ctx["err"], ctx["h"]
        dyhat = ((2.0 / err.size) * err).astype(F32)
        grads = {"head.w": dyhat.T @ h}
        dh = dyhat @ params["head.w"]
        for i in range(len(self._tags) - 1, -1, -1):
            tag, cache = ctx["caches"][i]
            da = (dh * (ctx["pre"][i] > 0)).astype(F32)
            dh, dw = ql.linear_backward(da, cache, cfgs[tag], rng=rng, step=step)
            grads[f"{tag}.w"] = dw
        total, by_layer = _collect_clamps(ctx["caches"])
        return loss, grads, {"clamp_events": total, "clamp_by_layer": by_layer}


# ── transformer building blocks ──────────────────────────────────────────────


def _rmsnorm_fwd(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + F32(_NORM_EPS))
    return (x / r) * g, r


def _rmsnorm_bwd(dy, x, g, r):
    t = dy * g
    d = x.shape[-1]
    dot = np.sum(t * x, axis=-1, keepdims=True)
    dx = t / r - x * (dot / (d * r**3))
    dg = np.sum(dy * (x / r), axis=tuple(range(x.ndim - 1)))
    return dx.astype(F32), dg.astype(F32)


def _silu(u):
    sig = 1.0 / (1.0 + np.exp(-u))
    return u * sig, sig


def _softmax_causal(scores):
    """Softmax over the last axis with strictly-upper-triangle masking."""
    n = scores.shape[-1]
    keep = np.tril(np.ones((n, n), dtype=bool))
    s = np.where(keep, scores, -np.inf)
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(F32)


class TinyTransformer:
    """Pre-norm causal transformer with quantized block linears."""

    def __init__(
        self,
        layers: int = 2,
        d_model: int = 64,
        heads: int = 4,
        seq_len: int = 128,
        vocab: int = 32,
        ffn_hidden: int = 0,
    ):
        if layers < 1:
            raise ValueError(f"layers must be >= 1, got {layers}")
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        if vocab < 2:
            raise ValueError(f"vocab must be >= 2, got {vocab}")
        if seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {seq_len}")
        self.layers = layers
        self.d_model = d_model
        self.heads = heads
        self.seq_len = seq_len
        self.vocab = vocab
        self.ffn_hidden = ffn_hidden or 2 * d_model
        self._tags = tuple(
            f"l{i}.{part}"
            for i in range(layers)
            for part in ("qkv", "att_out", "ffn1", "ffn2")
        )

    @property
    def name(self) -> str:
        return "tiny-transformer"

    def quant_tags(self) -> Tuple[str, ...]:
        return self._tags

    def weight_param(self, tag: str) -> str:
        return f"{tag}.w"

    def init_params(self, seed: int) -> Dict[str, np.ndarray]:
        d, f, v = self.d_model, self.ffn_hidden, self.vocab

        def normal(name, shape, std):
            rng = fc.stream(seed, "init", name)
            return (rng.standard_normal(shape) * std).astype(F32)

        params = {
            "tok_emb": normal("tok_emb", (v, d), 0.02),
            "pos_emb": normal("pos_emb", (self.seq_len, d), 0.02),
            "out_norm": np.ones(d, dtype=F32),
            "head.w": normal("head", (v, d), 1.0 / math.sqrt(d)),
        }
        for i in range(self.layers):
            params[f"l{i}.att_norm"] = np.ones(d, dtype=F32)
            params[f"l{i}.ffn_norm"] = np.ones(d, dtype=F32)
            params[f"l{i}.qkv.w"] = normal(f"l{i}.qkv", (3 * d, d), 1.0 / math.sqrt(d))
            params[f"l{i}.att_out.w"] = normal(
                f"l{i}.att_out", (d, d), 1.0 / math.sqrt(d)
            )
            params[f"l{i}.ffn1.w"] = normal(f"l{i}.ffn1", (2 * f, d), 1.0 / math.sqrt(d))
            params[f"l{i}.ffn2.w"] = normal(f"l{i}.ffn2", (d, f), 1.0 / math.sqrt(f))
        return params

    # ── forward ──────────────────────────────────────────────────────────

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] > self.seq_len:
            raise ValueError(
                f"token ids must be (batch, length<= {self.seq_len}), got {ids.shape}"
            )
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise ValueError(f"token ids out of range [0, {self.vocab})")
        return ids

    def _forward(self, params, batch, cfgs, step):
        ids, targets = batch
        ids = self._check_ids(ids)
        targets = self._check_ids(targets)
        b, length = ids.shape
        d, h = self.d_model, self.heads
        hd = d // h
        scale = F32(1.0 / math.sqrt(hd))

        x = params["tok_emb"][ids] + params["pos_emb"][None, :length]
        blocks = []
        for i in range(self.layers):
            blk = {"x0": x}
            g_a = params[f"l{i}.att_norm"]
            n1, r1 = _rmsnorm_fwd(x, g_a)
            blk["n1"], blk["r1"] = n1, r1
            n1_2 = n1.reshape(b * length, d)
            qkv, blk["qkv_cache"] = ql.linear_forward(
                n1_2, params[f"l{i}.qkv.w"], cfgs[f"l{i}.qkv"], step=step
            )
            trip = qkv.reshape(b, length, 3, h, hd).transpose(2, 0, 3, 1, 4)
            q, k, v = trip[0], trip[1], trip[2]
            p = _softmax_causal((q @ k.transpose(0, 1, 3, 2)) * scale)
            ctx = p @ v
            blk.update(q=q, k=k, v=v, p=p)
            ctx2 = ctx.transpose(0, 2, 1, 3).reshape(b * length, d)
            blk["ctx2"] = ctx2
            att, blk["att_cache"] = ql.linear_forward(
                ctx2, params[f"l{i}.att_out.w"], cfgs[f"l{i}.att_out"], step=step
            )
            x = x + att.reshape(b, length, d)

            blk["x1"] = x
            g_f = params[f"l{i}.ffn_norm"]
            n2, r2 = _rmsnorm_fwd(x, g_f)
            blk["n2"], blk["r2"] = n2, r2
            n2_2 = n2.reshape(b * length, d)
            uv, blk["ffn1_cache"] = ql.linear_forward(
                n2_2, params[f"l{i}.ffn1.w"], cfgs[f"l{i}.ffn1"], step=step
            )
            fdim = self.ffn_hidden
            u, w_half = uv[:, :fdim], uv[:, fdim:]
            su, sig = _silu(u)
            s = (su * w_half).astype(F32)
            blk.update(u=u, w_half=w_half, su=su, sig=sig, s=s)
            ffn, blk["ffn2_cache"] = ql.linear_forward(
                s, params[f"l{i}.ffn2.w"], cfgs[f"l{i}.ffn2"], step=step
            )
            x = x + ffn.reshape(b, length, d)
            blocks.append(blk)

        n3, r3 = _rmsnorm_fwd(x, params["out_norm"])
        n3_2 = n3.reshape(b * length, d)
        logits = n3_2 @ params["head.w"].T

        m = np.max(logits, axis=-1, keepdims=True)
        z = logits - m
        ez = np.exp(z)
        sez = np.sum(ez, axis=-1, keepdims=True)
        flat_t = targets.reshape(-1)
        logp = z[np.arange(z.shape[0]), flat_t] - np.log(sez[:, 0])
        token_losses = (-logp).reshape(b, length)
        loss = float(np.mean(token_losses.astype(np.float64)))
        return loss, {
            "b": b,
            "length": length,
            "x_final": x,
            "n3": n3,
            "r3": r3,
            "n3_2": n3_2,
            "softmax": ez / sez,
            "targets": flat_t,
            "token_losses": token_losses,
            "blocks": blocks,
        }

    def _caches(self, ctx):
        out = []
        for i, blk in enumerate(ctx["blocks"]):
            out.append((f"l{i}.qkv", blk["qkv_cache"]))
            out.append((f"l{i}.att_out", blk["att_cache"]))
            out.append((f"l{i}.ffn1", blk["ffn1_cache"]))
            out.append((f"l{i}.ffn2", blk["ffn2_cache"]))
        return out

    def forward_loss(self, params, batch, cfgs, step):
        _check_cfgs(self, cfgs)
        loss, ctx = self._forward(params, batch, cfgs, step)
        total, by_layer = _collect_clamps(self._caches(ctx))
        return loss, {"clamp_events": total, "clamp_by_layer": by_layer}

    def token_losses(self, params, batch, cfgs, step):
        _check_cfgs(self, cfgs)
        _, ctx = self._forward(params, batch, cfgs, step)
        return ctx["token_losses"]

    def input_acts(self, params, batch, cfgs, step):
        _check_cfgs(self, cfgs)
        _, ctx = self._forward(params, batch, cfgs, step)
        acts = {}
        for i, blk in enumerate(ctx["blocks"]):
            b, length = blk["x0"].shape[0], blk["x0"].shape[1]
            acts[f"l{i}.qkv"] = blk["n1"].reshape(b * length, self.d_model)
            acts[f"l{i}.att_out"] = blk["ctx2"]
            acts[f"l{i}.ffn1"] = blk["n2"].reshape(b * length, self.d_model)
            acts[f"l{i}.ffn2"] = blk["s"]
        return acts

    # ── backward ─────────────────────────────────────────────────────────

    def loss_and_grads(self, params, batch, cfgs, step, rng):
        _check_cfgs(self, cfgs)
        loss, ctx = self._forward(params, batch, cfgs, step)
        b, length = ctx["b"], ctx["length"]
        d, h = self.d_model, self.heads
        hd = d // h
        scale = F32(1.0 / math.sqrt(hd))
        n_tok = b * length
        grads = {}

        dlogits = ctx["softmax"].astype(F32)
        dlogits[np.arange(n_tok), ctx["targets"]] -= F32(1.0)
        dlogits /= F32(n_tok)
        grads["head.w"] = dlogits.T @ ctx["n3_2"]
        dn3 = (dlogits @ params["head.w"]).reshape(b, length, d)
        dx, grads["out_norm"] = _rmsnorm_bwd(
            dn3, ctx["x_final"], params["out_norm"], ctx["r3"]
        )

        for i in range(self.layers - 1, -1, -1):
            blk = ctx["blocks"][i]
            fdim = self.ffn_hidden

            # ffn sublayer: x2 = x1 + ffn2(swiglu(ffn1(norm(x1))))
            d_ffn = dx.reshape(n_tok, d)
            ds, dw2 = ql.linear_backward(
                d_ffn, blk["ffn2_cache"], cfgs[f"l{i}.ffn2"], rng=rng, step=step
            )
            grads[f"l{i}.ffn2.w"] = dw2
            sig, su, u, w_half = blk["sig"], blk["su"], blk["u"], blk["w_half"]
            du = (ds * w_half * (sig * (1.0 + u * (1.0 - sig)))).astype(F32)
            dw_half = (ds * su).astype(F32)
            duv = np.concatenate([du, dw_half], axis=1)
            dn2_2, dw1 = ql.linear_backward(
                duv, blk["ffn1_cache"], cfgs[f"l{i}.ffn1"], rng=rng, step=step
            )
            grads[f"l{i}.ffn1.w"] = dw1
            dn2 = dn2_2.reshape(b, length, d)
            dx1, grads[f"l{i}.ffn_norm"] = _rmsnorm_bwd(
                dn2, blk["x1"], params[f"l{i}.ffn_norm"], blk["r2"]
            )
            dx = dx + dx1

            # attention sublayer: x1 = x0 + att_out(attend(qkv(norm(x0))))
            d_att = dx.reshape(n_tok, d)
            dctx2, dwo = ql.linear_backward(
                d_att, blk["att_cache"], cfgs[f"l{i}.att_out"], rng=rng, step=step
            )
            grads[f"l{i}.att_out.w"] = dwo
            dctx = dctx2.reshape(b, length, h, hd).transpose(0, 2, 1, 3)
            p, q, k, v = blk["p"], blk["q"], blk["k"], blk["v"]
            dp = dctx @ v.transpose(0, 1, 3, 2)
            dv = p.transpose(0, 1, 3, 2) @ dctx
            dscores = (p * (dp - np.sum(dp * p, axis=-1, keepdims=True))).astype(F32)
            dq = (dscores @ k) * scale
            dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale
            dtrip = np.stack([dq, dk, dv])  # (3, b, h, length, hd)
            dqkv = dtrip.transpose(1, 3, 0, 2, 4).reshape(n_tok, 3 * d)
            dn1_2, dwq = ql.linear_backward(
                dqkv, blk["qkv_cache"], cfgs[f"l{i}.qkv"], rng=rng, step=step
            )
            grads[f"l{i}.qkv.w"] = dwq
            dn1 = dn1_2.reshape(b, length, d)
            dx0, grads[f"l{i}.att_norm"] = _rmsnorm_bwd(
                dn1, blk["x0"], params[f"l{i}.att_norm"], blk["r1"]
            )
            dx = dx + dx0

        ids = np.asarray(batch[0])
        dx2 = dx.reshape(n_tok, d)
        dtok = np.zeros_like(params["tok_emb"])
        np.add.at(dtok, ids.reshape(-1), dx2)
        grads["tok_emb"] = dtok
        dpos = np.zeros_like(params["pos_emb"])
        dpos[:length] = dx.sum(axis=0)
        grads["pos_emb"] = dpos

        total, by_layer = _collect_clamps(self._caches(ctx))
        return loss, grads, {"clamp_events": total, "clamp_by_layer": by_layer}
