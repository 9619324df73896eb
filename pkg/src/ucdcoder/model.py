"""The grid classifier: embeddings, temporal and branched conv blocks, head.

Pipeline (channels last, height fixed at 6):

    embed -> temporal blocks (width-axis dilated convs)
          -> stage-1 blocks -> width pooling
          -> stage-2 blocks -> width pooling
          -> stage-3 blocks -> full max pool -> linear -> tied logits

The output projection reuses the input embedding matrix (rows 1..V,
transposed); row 0 is the PAD row, pinned to zeros and never updated.

Branch layout of the three block kinds (every internal conv is same-padded,
stride 1, relu-activated; each block ends in dropout, a residual add and
layer normalization, so blocks preserve their input shape):

    kind 1: 1x1 | 1x1-3x3 | 1x1-3x3-3x3 | avgpool3x3-1x1
    kind 2: 1x1 | 1x1-1x3-3x1 | 1x1-(3x1-1x3)x2 | avgpool3x3-1x1
    kind 3: 1x1 | 1x1-[1x3 || 3x1] | 1x1-3x3-[1x3 || 3x1] | avgpool3x3-1x1

Each of the four branches emits width/4 channels; the [a || b] tails of
kind 3 run on a shared input and emit width/8 each, concatenated. Stage
widths must divide accordingly.

The width-reducing pooling stage concatenates a (1,3)-window (1,2)-strided
valid max-pool branch (keeping all input channels) with an equally strided
valid conv branch (relu) producing the remaining channels of the next
stage width. All width reduction happens here; height stays 6 throughout.

Dropout uses a counter-based generator keyed by (run seed, site index)
with the global step as counter, so a forward pass is a pure function of
(parameters, inputs, seed, step) and finite-difference checks can run
through train-mode dropout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .certificate import AGE_CLASSES, GENDER_STATES, DEFAULT_YEAR_BASE, DEFAULT_YEAR_STATES
from .icd10 import Vocabulary


class ConfigError(ValueError):
    """Raised for inconsistent model configurations."""


class CheckpointError(ValueError):
    """Base class for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file, or a truncated/corrupt one."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Stored arrays disagree with the stored configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    grid_width: int = 20
    embed_dim: int = 512
    stage_widths: tuple[int, int, int] = (512, 1024, 1536)
    block_counts: tuple[int, int, int] = (3, 5, 2)
    temporal_dilations: tuple[int, ...] = (1, 2)
    temporal_kernel: int = 3
    dropout_rate: float = 0.1
    head_width: int = 512
    year_states: int = DEFAULT_YEAR_STATES
    year_base: int = DEFAULT_YEAR_BASE

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        object.__setattr__(self, "block_counts", tuple(self.block_counts))
        object.__setattr__(self, "temporal_dilations", tuple(self.temporal_dilations))
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.head_width != self.embed_dim:
            raise ConfigError(
                f"head_width ({self.head_width}) must equal embed_dim "
                f"({self.embed_dim}): the output projection is the transposed embedding"
            )
        if len(self.stage_widths) != 3 or len(self.block_counts) != 3:
            raise ConfigError("stage_widths and block_counts must have 3 entries")
        if list(self.stage_widths) != sorted(self.stage_widths):
            raise ConfigError(f"stage widths must be nondecreasing, got {self.stage_widths}")
        if self.stage_widths[0] != self.embed_dim:
            raise ConfigError("the first stage width must equal embed_dim")
        for s, width in enumerate(self.stage_widths, start=1):
            if width % 4:
                raise ConfigError(f"stage {s} width {width} is not divisible by 4")
        if self.stage_widths[2] % 8:
            raise ConfigError(
                f"stage 3 width {self.stage_widths[2]} is not divisible by 8 "
                "(kind-3 branch tails split in half)"
            )
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal_kernel must be odd and positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.year_states < 1:
            raise ConfigError("year_states must be positive")
        for w, stage in zip(self.pooled_widths(), ("first", "second")):
            if w < 3:
                raise ConfigError(
                    f"grid width {self.grid_width} leaves fewer than 3 columns "
                    f"entering the {stage} pooling stage"
                )

    def pooled_widths(self) -> tuple[int, int]:
        """Grid widths entering the two pooling stages."""
        w1 = self.grid_width
        w2 = (w1 - 3) // 2 + 1
        return w1, w2

    def final_width(self) -> int:
        w2 = self.pooled_widths()[1]
        return (w2 - 3) // 2 + 1

    def dropout_sites(self) -> int:
        return len(self.temporal_dilations) + sum(self.block_counts)


def paper_config(vocab_size: int = 7404) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size)


def desk_config(vocab_size: int, **overrides) -> ModelConfig:
    """Small configuration for laptop-scale runs and tests."""
    kwargs = dict(
        grid_width=12,
        embed_dim=64,
        stage_widths=(64, 128, 192),
        block_counts=(1, 2, 1),
        head_width=64,
    )
    kwargs.update(overrides)
    return ModelConfig(vocab_size=vocab_size, **kwargs)


def toy_config(vocab_size: int = 12, grid_width: int = 8) -> ModelConfig:
    """Minimal configuration used by the gradient-check suites."""
    return ModelConfig(
        vocab_size=vocab_size,
        grid_width=grid_width,
        embed_dim=8,
        stage_widths=(8, 16, 24),
        block_counts=(1, 1, 1),
        head_width=8,
    )


# Branch step table: (step name, kernel, out-channel divisor of the stage
# width). A step "x" feeds the next step; steps named "*a"/"*b" share the
# preceding step's output and their results concatenate.
_BRANCH_STEPS: dict[int, list[list[tuple[str, tuple[int, int], int]]]] = {
    1: [
        [("c0", (1, 1), 4)],
        [("c0", (1, 1), 4), ("c1", (3, 3), 4)],
        [("c0", (1, 1), 4), ("c1", (3, 3), 4), ("c2", (3, 3), 4)],
        [("c0", (1, 1), 4)],
    ],
    2: [
        [("c0", (1, 1), 4)],
        [("c0", (1, 1), 4), ("c1", (1, 3), 4), ("c2", (3, 1), 4)],
        [
            ("c0", (1, 1), 4),
            ("c1", (3, 1), 4),
            ("c2", (1, 3), 4),
            ("c3", (3, 1), 4),
            ("c4", (1, 3), 4),
        ],
        [("c0", (1, 1), 4)],
    ],
    3: [
        [("c0", (1, 1), 4)],
        [("c0", (1, 1), 4), ("c1a", (1, 3), 8), ("c1b", (3, 1), 8)],
        [("c0", (1, 1), 4), ("c1", (3, 3), 4), ("c2a", (1, 3), 8), ("c2b", (3, 1), 8)],
        [("c0", (1, 1), 4)],
    ],
}

_POOL_BRANCH = 3  # branch index preceded by the 3x3 same-padded average pool


def _branch_convs(kind: int, width: int) -> list[list[tuple[str, tuple[int, int], int, int]]]:
    """Per branch: (name, kernel, cin, cout) honoring the parallel-pair rule."""
    branches = []
    for steps in _BRANCH_STEPS[kind]:
        convs = []
        cin = width
        i = 0
        while i < len(steps):
            name, hw, div = steps[i]
            if name.endswith("a"):
                name_b, hw_b, div_b = steps[i + 1]
                convs.append((name, hw, cin, width // div))
                convs.append((name_b, hw_b, cin, width // div_b))
                cin = width // div + width // div_b
                i += 2
            else:
                convs.append((name, hw, cin, width // div))
                cin = width // div
                i += 1
        branches.append(convs)
    return branches


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) triples for every trainable array.

    The order is normative for checkpoints. fan_in drives initialization:
    rows for matrices, kh*kw*Cin for conv kernels, 0 for gains and biases.
    """
    d = config.embed_dim
    shapes: list[tuple[str, tuple[int, ...], int]] = [
        ("embedding", (config.vocab_size + 1, d), config.vocab_size + 1),
        ("gender_proj", (GENDER_STATES, d), GENDER_STATES),
        ("age_proj", (AGE_CLASSES, d), AGE_CLASSES),
        ("year_proj", (config.year_states, d), config.year_states),
    ]

    def conv(name: str, kh: int, kw: int, cin: int, cout: int) -> None:
        shapes.append((f"{name}.kernel", (kh, kw, cin, cout), kh * kw * cin))
        shapes.append((f"{name}.bias", (cout,), 0))

    def norm(name: str, c: int) -> None:
        shapes.append((f"{name}.gain", (c,), 0))
        shapes.append((f"{name}.bias", (c,), 0))

    k = config.temporal_kernel
    for i in range(len(config.temporal_dilations)):
        conv(f"temporal{i}.conv1", 1, k, d, d)
        conv(f"temporal{i}.conv2", 1, k, d, d)
        norm(f"temporal{i}.norm", d)

    for s, (width, count) in enumerate(
        zip(config.stage_widths, config.block_counts), start=1
    ):
        for j in range(count):
            prefix = f"stage{s}.block{j}"
            for br, convs in enumerate(_branch_convs(s, width)):
                for name, (kh, kw), cin, cout in convs:
                    conv(f"{prefix}.br{br}.{name}", kh, kw, cin, cout)
            norm(f"{prefix}.norm", width)
        if s < 3:
            conv(f"pool{s}.conv", 1, 3, width, config.stage_widths[s] - width)

    shapes.append(("head.weight", (config.stage_widths[2], config.head_width),
                   config.stage_widths[2]))
    return shapes


class ModelParameters:
    """All trainable tensors of one model, addressed by hierarchical name."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    @property
    def embedding(self) -> Tensor:
        return self.tensors["embedding"]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def pin_pad_row(self) -> None:
        self.embedding.data[0] = 0.0

    def copy(self) -> "ModelParameters":
        tensors = {
            name: Tensor(t.data.copy(), requires_grad=True, name=name)
            for name, t in self.tensors.items()
        }
        return ModelParameters(self.config, tensors)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Uniform variance-scaling initialization: weights ~ U[-a, a] with
    a = sqrt(3 / fan_in) (variance 1/fan_in); gains 1, biases 0, PAD row 0."""
    rng = np.random.default_rng([seed, 3])
    tensors: dict[str, Tensor] = {}
    for name, shape, fan_in in parameter_shapes(config):
        if fan_in > 0:
            bound = np.sqrt(3.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = ModelParameters(config, tensors)
    params.pin_pad_row()
    return params


def _dropout_rng(seed: int, site: int, step: int) -> np.random.Generator:
    bitgen = np.random.Philox(counter=[step, 0, 0, 0], key=[seed, site])
    return np.random.Generator(bitgen)


def embed_inputs(params: ModelParameters, grids, demos) -> Tensor:
    """Embed a grid of vocabulary indices plus demographic category indices.

    grids: (6, W) or (B, 6, W) integer vocabulary indices (0 = PAD).
    demos: matching (3,) or (B, 3) category indices (gender, age, year).
    The summed demographic projection is added to every grid cell, PAD
    cells included (the PAD embedding row itself is zero).
    """
    grids = np.asarray(grids)
    demos = np.asarray(demos)
    single = grids.ndim == 2
    if single:
        grids = grids[None]
        demos = demos[None]
    if grids.ndim != 3 or demos.shape != (grids.shape[0], 3):
        raise ConfigError(
            f"expected grids (B, 6, W) with demos (B, 3), got {grids.shape} and {demos.shape}"
        )
    e = ad.embed_gather(params["embedding"], grids)
    g = ad.embed_gather(params["gender_proj"], demos[:, 0])
    a = ad.embed_gather(params["age_proj"], demos[:, 1])
    y = ad.embed_gather(params["year_proj"], demos[:, 2])
    s = ad.add(ad.add(g, a), y)
    s = ad.reshape(s, (grids.shape[0], 1, 1, params.config.embed_dim))
    out = ad.add(e, s)
    if single:
        out = ad.reshape(out, out.shape[1:])
    return out


def _conv_bias(x: Tensor, params: ModelParameters, key: str, stride=(1, 1),
               dilation=(1, 1), padding: str = "same") -> Tensor:
    y = ad.conv2d(x, params[f"{key}.kernel"], stride=stride, dilation=dilation,
                  padding=padding)
    return ad.add(y, params[f"{key}.bias"])


def temporal_block(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    dilation: int,
    mode: str = "eval",
    dropout_rate: float | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Residual pair of width-axis dilated convolutions:
    layer_norm(x + dropout(conv2(relu(conv1(x)))))."""
    rate = params.config.dropout_rate if dropout_rate is None else dropout_rate
    d = (1, dilation)
    h = ad.relu(_conv_bias(x, params, f"{prefix}.conv1", dilation=d))
    h = _conv_bias(h, params, f"{prefix}.conv2", dilation=d)
    h = ad.dropout(h, rate, mode, rng if rng is not None else _dropout_rng(0, 0, 0))
    return ad.layer_norm(ad.add(x, h), params[f"{prefix}.norm.gain"],
                         params[f"{prefix}.norm.bias"])


def inception_block(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    kind: int,
    mode: str = "eval",
    dropout_rate: float | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Four-branch block: layer_norm(x + dropout(concat(branches(x))))."""
    width = x.shape[-1]
    rate = params.config.dropout_rate if dropout_rate is None else dropout_rate
    branches = []
    for br, convs in enumerate(_branch_convs(kind, width)):
        h = x
        if br == _POOL_BRANCH:
            h = ad.avgpool2d(h, (3, 3), (1, 1), "same")
        i = 0
        while i < len(convs):
            name, hw, cin, cout = convs[i]
            if name.endswith("a"):
                name_b = convs[i + 1][0]
                ha = ad.relu(_conv_bias(h, params, f"{prefix}.br{br}.{name}"))
                hb = ad.relu(_conv_bias(h, params, f"{prefix}.br{br}.{name_b}"))
                h = ad.concat([ha, hb], axis=-1)
                i += 2
            else:
                h = ad.relu(_conv_bias(h, params, f"{prefix}.br{br}.{name}"))
                i += 1
        branches.append(h)
    cat = ad.concat(branches, axis=-1)
    dropped = ad.dropout(cat, rate, mode, rng if rng is not None else _dropout_rng(0, 0, 0))
    return ad.layer_norm(ad.add(x, dropped), params[f"{prefix}.norm.gain"],
                         params[f"{prefix}.norm.bias"])


def inception_pool(x: Tensor, params: ModelParameters, prefix: str) -> Tensor:
    """Width-halving stage: concat(maxpool branch, strided conv branch)."""
    if x.shape[-2] < 3:
        raise ConfigError(f"pooling needs width >= 3, got {x.shape[-2]}")
    mp = ad.maxpool2d(x, (1, 3), (1, 2))
    cv = ad.relu(_conv_bias(x, params, f"{prefix}.conv", stride=(1, 2), padding="valid"))
    return ad.concat([mp, cv], axis=-1)


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, V)
    probabilities: np.ndarray  # (B, V), rows sum to 1

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def forward(
    params: ModelParameters,
    grids,
    demos,
    mode: str = "eval",
    seed: int = 0,
    step: int = 0,
    dropout_rate: float | None = None,
) -> ForwardOutput:
    """Run the full pipeline on a batch of encoded certificates."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    grids = np.asarray(grids)
    if grids.ndim == 2:
        grids = grids[None]
        demos = np.asarray(demos)[None]
    b = grids.shape[0]
    if grids.shape[2] != cfg.grid_width:
        raise ConfigError(
            f"grid width {grids.shape[2]} does not match the configured {cfg.grid_width}"
        )
    site = iter(range(cfg.dropout_sites()))

    x = embed_inputs(params, grids, demos)
    for i, dilation in enumerate(cfg.temporal_dilations):
        x = temporal_block(
            x, params, f"temporal{i}", dilation, mode, dropout_rate,
            _dropout_rng(seed, next(site), step),
        )
    for s in (1, 2, 3):
        for j in range(cfg.block_counts[s - 1]):
            x = inception_block(
                x, params, f"stage{s}.block{j}", s, mode, dropout_rate,
                _dropout_rng(seed, next(site), step),
            )
        if s < 3:
            x = inception_pool(x, params, f"pool{s}")

    x = ad.maxpool2d(x, (6, cfg.final_width()), (1, 1))
    x = ad.reshape(x, (b, cfg.stage_widths[2]))
    h = ad.matmul(x, params["head.weight"])
    logits = ad.matmul(h, ad.transpose(ad.row_slice(params["embedding"], 1,
                                                    cfg.vocab_size + 1)))
    probabilities = np.exp(ad.log_softmax(logits.data))
    return ForwardOutput(logits=logits, probabilities=probabilities)


def top_indices(probabilities: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k most probable codes per row; ties resolve to
    the lowest vocabulary index (stable sort on descending probability)."""
    v = probabilities.shape[1]
    if not 1 <= k <= v:
        raise ValueError(f"k must lie in [1, {v}], got {k}")
    order = np.argsort(-probabilities, axis=1, kind="stable")
    return order[:, :k]


def predict_topk(
    output: ForwardOutput | np.ndarray, vocab: Vocabulary, k: int
) -> list[list[tuple]]:
    """Per example, the k most probable (Code, probability) pairs."""
    probs = output.probabilities if isinstance(output, ForwardOutput) else np.asarray(output)
    cols = top_indices(probs, k)
    return [
        [(vocab.code_at(int(c) + 1), float(probs[r, c])) for c in cols[r]]
        for r in range(probs.shape[0])
    ]


# Checkpoint layout (little endian): magic "UCD1", u16 format version,
# u32 config length, UTF-8 config document (key=value lines; includes the
# vocabulary), u32 array count, then per array: u16 name length, name,
# u8 dtype tag (0 = float32), u8 rank, u32 extents, raw payload. Arrays
# appear in parameter_shapes() order.
_MAGIC = b"UCD1"
_VERSION = 1
_DTYPE_F32 = 0

_CONFIG_FIELDS = (
    "vocab_size", "grid_width", "embed_dim", "stage_widths", "block_counts",
    "temporal_dilations", "temporal_kernel", "dropout_rate", "head_width",
    "year_states", "year_base",
)


def _config_doc(config: ModelConfig, vocab: Vocabulary) -> str:
    lines = []
    for key in _CONFIG_FIELDS:
        value = getattr(config, key)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    lines.append("vocabulary=" + ",".join(code.text for code in vocab.codes))
    return "\n".join(lines) + "\n"


def _parse_config_doc(doc: str) -> tuple[ModelConfig, Vocabulary]:
    fields: dict[str, str] = {}
    for line in doc.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointFormatError(f"malformed config line {line!r}")
        fields[key] = value
    try:
        vocab = Vocabulary(fields.pop("vocabulary").split(","))
        kwargs = {
            "vocab_size": int(fields["vocab_size"]),
            "grid_width": int(fields["grid_width"]),
            "embed_dim": int(fields["embed_dim"]),
            "stage_widths": tuple(int(v) for v in fields["stage_widths"].split(",")),
            "block_counts": tuple(int(v) for v in fields["block_counts"].split(",")),
            "temporal_dilations": tuple(
                int(v) for v in fields["temporal_dilations"].split(",")
            ),
            "temporal_kernel": int(fields["temporal_kernel"]),
            "dropout_rate": float(fields["dropout_rate"]),
            "head_width": int(fields["head_width"]),
            "year_states": int(fields["year_states"]),
            "year_base": int(fields["year_base"]),
        }
    except KeyError as exc:
        raise CheckpointFormatError(f"config document missing key {exc}") from None
    config = ModelConfig(**kwargs)  # re-runs all config invariants
    if vocab.size != config.vocab_size:
        raise CheckpointShapeError(
            f"stored vocabulary has {vocab.size} codes, config says {config.vocab_size}"
        )
    return config, vocab


def save_checkpoint(params: ModelParameters, vocab: Vocabulary, path) -> None:
    """Write parameters as float32 with the config and vocabulary inline."""
    doc = _config_doc(params.config, vocab).encode("utf-8")
    names = [name for name, _, _ in parameter_shapes(params.config)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(doc)))
        fh.write(doc)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = params[name].data.astype("<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_F32, data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> tuple[ModelParameters, Vocabulary]:
    """Read a checkpoint; validates magic, version, config, names and shapes."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version}, expected {_VERSION}"
            )
        (doc_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config, vocab = _parse_config_doc(_read_exact(fh, doc_len, "config").decode("utf-8"))
        expected = parameter_shapes(config)
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        if count != len(expected):
            raise CheckpointShapeError(
                f"checkpoint stores {count} arrays, config requires {len(expected)}"
            )
        tensors: dict[str, Tensor] = {}
        for name, shape, _ in expected:
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "array name length"))
            stored_name = _read_exact(fh, name_len, "array name").decode("utf-8")
            if stored_name != name:
                raise CheckpointShapeError(
                    f"array order mismatch: found {stored_name!r}, expected {name!r}"
                )
            dtype_tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "array header"))
            if dtype_tag != _DTYPE_F32:
                raise CheckpointFormatError(f"array {name!r}: unknown dtype tag {dtype_tag}")
            extents = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "array extents"))
            if extents != shape:
                raise CheckpointShapeError(
                    f"array {name!r} has shape {extents}, config requires {shape}"
                )
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
            payload = _read_exact(fh, n_bytes, f"array {name!r} payload")
            data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after the last array")
    if np.any(tensors["embedding"].data[0] != 0.0):
        raise CheckpointShapeError("PAD embedding row is not zero")
    return ModelParameters(config, tensors), vocab
