"""
Motion Transformer Module

Learnable motion tokens are processed together with the image tokens by a
stack of transformer layers and decoded by a linear head into one keypoint and
one affine matrix per token.

Functions:
    init_transformer_params: Motion tokens, layer weights and the decode head
    msa: Multi-head attention of query tokens over key/value tokens
    unified_layer: One encoder block over the concatenated [motion; image] tokens
    split_attention_update: Motion self attention plus cross attention, summed
    split_layer: One block with separate motion and image updates
    run_transformer: The full layer stack on token matrices
    decode_head: Final motion tokens -> MotionSet
    estimate_motion: Image -> (MotionSet, AttentionMaps)

Block forms:
    standard: x <- LN(x + MSA(x)); x <- LN(x + FFN(x))
    paper-literal: y <- MSA(x); x <- FFN(LN(y) + y)

Attention modes:
    unified: one attention over all K + N tokens
    split: motion tokens attend to motion tokens and to image tokens with
        separate weights and the two results are summed; image tokens attend
        only among themselves

Notes:
    Motion tokens carry no positional encoding, so the layer stack is
    equivariant to permutations of the motion tokens. Attention logits are
    scaled by sqrt(d / heads).
"""

from dataclasses import dataclass

import numpy as np

from motiontools import numerics as nx
from motiontools.encoder import encode_image
from motiontools.general import ConfigError, ShapeError
from motiontools.motion_model import MotionSet

ATTENTION_MODES = ("unified", "split")
BLOCK_FORMS = ("standard", "paper-literal")
HEAD_OUTPUTS = 6
HEAD_BIAS = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class TransformerConfig:
    """
    Layer stack configuration.

    Attributes:
        layers (int): Number of layers L (default 12).
        heads (int): Attention heads h (default 3).
        dim (int): Token dimension d (default 192).
        ffn_dim (int): Hidden width of the feed-forward network (default 4 d).
        num_motion_tokens (int): K (default 10).
        attention_mode (str): "unified" or "split".
        block_form (str): "standard" or "paper-literal".
    """

    layers: int = 12
    heads: int = 3
    dim: int = 192
    ffn_dim: int = None
    num_motion_tokens: int = 10
    attention_mode: str = "unified"
    block_form: str = "standard"

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.dim)
        if self.layers < 1 or self.heads < 1 or self.num_motion_tokens < 1 or self.ffn_dim < 1:
            raise ConfigError(
                f"layers, heads, ffn_dim and num_motion_tokens must be positive, got "
                f"{self.layers}, {self.heads}, {self.ffn_dim}, {self.num_motion_tokens}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"token dim {self.dim} must be divisible by the number of heads {self.heads}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if self.block_form not in BLOCK_FORMS:
            raise ConfigError(f"block_form must be one of {BLOCK_FORMS}, got {self.block_form!r}")


@dataclass
class AttentionMaps:
    """
    Head-averaged attention of the motion-token queries, per layer.

    Attributes:
        motion (numpy.ndarray): (L, K, K) weights over motion tokens.
        image (numpy.ndarray): (L, K, N) weights over image tokens.
        grid_shape (tuple): (rows, cols) lattice of the image tokens.
    """

    motion: np.ndarray
    image: np.ndarray
    grid_shape: tuple = None


def _attention_params(rng, dim):
    return {name: nx.linear_params(rng, dim, dim) for name in ("query", "key", "value", "out")}


def _norm_params(dim):
    return {"gain": nx.parameter(np.ones(dim)), "bias": nx.zeros_parameter(dim)}


def _block_params(rng, config):
    block = {
        "ln1": _norm_params(config.dim),
        "ffn": {
            "fc1": nx.linear_params(rng, config.dim, config.ffn_dim),
            "fc2": nx.linear_params(rng, config.ffn_dim, config.dim),
        },
    }
    # literal blocks have no second norm
    if config.block_form == "standard":
        block["ln2"] = _norm_params(config.dim)
    return block


def _layer_params(rng, config):
    if config.attention_mode == "unified":
        layer = {"attn": _attention_params(rng, config.dim)}
        layer.update(_block_params(rng, config))
        return layer
    return {
        "self_attn": _attention_params(rng, config.dim),
        "cross_attn": _attention_params(rng, config.dim),
        "image_attn": _attention_params(rng, config.dim),
        "motion": _block_params(rng, config),
        "image": _block_params(rng, config),
    }


def init_transformer_params(rng, config):
    """
    Fresh transformer weights.

    The decode head starts at zero weight with bias [1, 0, 0, 1, 0, 0], so an
    untrained model outputs A = I and t = (0, 0) for every part.
    """
    return {
        "motion_tokens": nx.parameter(rng.normal(0.0, 0.02, size=(config.num_motion_tokens, config.dim))),
        "layers": [_layer_params(rng, config) for _ in range(config.layers)],
        "head": {
            "weight": nx.zeros_parameter((config.dim, HEAD_OUTPUTS)),
            "bias": nx.parameter(np.array(HEAD_BIAS)),
        },
    }


def _split_heads(x, heads):
    count, dim = x.shape
    return nx.transpose(nx.reshape(x, (count, heads, dim // heads)), (1, 0, 2))


def msa(params, queries, keys, heads):
    """
    Multi-head attention of ``queries`` over ``keys``.

    Per head j: softmax(Q_j K_j^T / sqrt(d / h)) V_j; heads are concatenated and
    projected by the output weights.

    Args:
        params (dict): ``query``, ``key``, ``value`` and ``out`` linear weights.
        queries (Tensor): (Nq, d) tokens.
        keys (Tensor): (Nk, d) tokens providing keys and values.
        heads (int): Number of heads.

    Returns:
        tuple: (output Tensor (Nq, d), attention weights Tensor (h, Nq, Nk)).

    Raises:
        ShapeError: If the token dimensions disagree or d is not divisible by h.
    """
    if queries.shape[-1] != keys.shape[-1] or queries.shape[-1] % heads:
        raise ShapeError(f"msa: query {queries.shape} and key {keys.shape} tokens with {heads} heads")
    dim = queries.shape[-1]
    q = _split_heads(nx.linear(queries, params["query"]["weight"], params["query"]["bias"]), heads)
    k = _split_heads(nx.linear(keys, params["key"]["weight"], params["key"]["bias"]), heads)
    v = _split_heads(nx.linear(keys, params["value"]["weight"], params["value"]["bias"]), heads)
    logits = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dim // heads))
    weights = nx.softmax(logits, axis=-1)
    mixed = nx.matmul(weights, v)
    merged = nx.reshape(nx.transpose(mixed, (1, 0, 2)), (queries.shape[0], dim))
    return nx.linear(merged, params["out"]["weight"], params["out"]["bias"]), weights


def feed_forward(params, x):
    hidden = nx.gelu(nx.linear(x, params["fc1"]["weight"], params["fc1"]["bias"]))
    return nx.linear(hidden, params["fc2"]["weight"], params["fc2"]["bias"])


def _norm(params, x):
    return nx.layer_norm(x, params["gain"], params["bias"])


def _finish_block(block, x, attended, block_form):
    if block_form == "paper-literal":
        return feed_forward(block["ffn"], _norm(block["ln1"], attended) + attended)
    x = _norm(block["ln1"], x + attended)
    return _norm(block["ln2"], x + feed_forward(block["ffn"], x))


def unified_layer(params, tokens, config):
    """
    One encoder block applied jointly to the concatenated [motion; image] tokens.

    Returns:
        tuple: (updated (K+N, d) tokens, attention weights Tensor (h, K+N, K+N)).
    """
    attended, weights = msa(params["attn"], tokens, tokens, config.heads)
    return _finish_block(params, tokens, attended, config.block_form), weights


def split_attention_update(params, motion, image, heads):
    """
    Motion-token update before residual and normalization: attention over the
    motion tokens plus attention over the image tokens.

    Returns:
        tuple: (summed update (K, d), self weights (h, K, K), cross weights (h, K, N)).
    """
    from_motion, self_weights = msa(params["self_attn"], motion, motion, heads)
    from_image, cross_weights = msa(params["cross_attn"], motion, image, heads)
    return from_motion + from_image, self_weights, cross_weights


def split_layer(params, motion, image, config):
    """
    One block in split mode.

    Returns:
        tuple: (motion tokens, image tokens, self weights, cross weights).
    """
    update, self_weights, cross_weights = split_attention_update(params, motion, image, config.heads)
    image_update, _ = msa(params["image_attn"], image, image, config.heads)
    motion = _finish_block(params["motion"], motion, update, config.block_form)
    image = _finish_block(params["image"], image, image_update, config.block_form)
    return motion, image, self_weights, cross_weights


def run_transformer(params, motion_tokens, image_tokens, config, grid_shape=None):
    """
    Run all layers.

    Args:
        params (dict): From ``init_transformer_params``.
        motion_tokens (Tensor): (K, d) initial motion tokens.
        image_tokens (Tensor): (N, d) image tokens.
        config (TransformerConfig): Layer configuration.
        grid_shape (tuple, optional): Patch lattice, recorded in the maps.

    Returns:
        tuple: (final motion tokens (K, d), final image tokens (N, d), AttentionMaps)
    """
    count = motion_tokens.shape[0]
    motion_maps, image_maps = [], []
    if config.attention_mode == "unified":
        tokens = nx.concat([motion_tokens, image_tokens], axis=0)
        for layer in params["layers"]:
            tokens, weights = unified_layer(layer, tokens, config)
            rows = weights.data[:, :count, :].mean(axis=0)
            motion_maps.append(rows[:, :count])
            image_maps.append(rows[:, count:])
        motion, image = tokens[:count], tokens[count:]
    else:
        motion, image = motion_tokens, image_tokens
        for layer in params["layers"]:
            motion, image, self_weights, cross_weights = split_layer(layer, motion, image, config)
            motion_maps.append(self_weights.data.mean(axis=0))
            image_maps.append(cross_weights.data.mean(axis=0))
    maps = AttentionMaps(np.stack(motion_maps), np.stack(image_maps), grid_shape)
    return motion, image, maps


def decode_head(head, motion_tokens):
    """
    Linear regression of [a11, a12, a21, a22, tx, ty] from each final motion token.

    Args:
        head (dict): ``weight`` (d, 6) and ``bias`` (6,).
        motion_tokens (Tensor): (K, d).

    Returns:
        MotionSet: K parts, no background.
    """
    out = nx.linear(motion_tokens, head["weight"], head["bias"])
    count = motion_tokens.shape[0]
    affines = nx.reshape(out[:, :4], (count, 2, 2))
    return MotionSet(out[:, 4:6], affines)


def estimate_motion(params, image, encoder_config, transformer_config):
    """
    Detect the K part motions of an image.

    Args:
        params (dict): ``{"encoder": ..., "transformer": ...}`` weights.
        image (Tensor): (3, H, W) image.
        encoder_config (EncoderConfig): Image-token pathway.
        transformer_config (TransformerConfig): Layer stack.

    Returns:
        tuple: (MotionSet, AttentionMaps)
    """
    image_tokens = encode_image(params["encoder"], image, encoder_config)
    if image_tokens.tokens.shape[1] != transformer_config.dim:
        raise ShapeError(
            f"image tokens have dim {image_tokens.tokens.shape[1]}, transformer expects {transformer_config.dim}"
        )
    weights = params["transformer"]
    motion, _, maps = run_transformer(
        weights, weights["motion_tokens"], image_tokens.tokens, transformer_config, image_tokens.grid_shape
    )
    return decode_head(weights["head"], motion), maps
