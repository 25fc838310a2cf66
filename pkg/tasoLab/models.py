from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import hashlib
import math

import numpy as np
from loguru import logger

from .adapter import SparseLoraModule, load_adapter, save_adapter
from .autodiff import (
    Matrix, add, add_bias, cross_entropy, gelu, matmul, mse, relu,
    reshape, scale, softmax_rows, transpose,
)
from .schema import Activation, LossKind
from .serialization import load_tensor, save_tensor
from .utils import ContractError, SchemaError, ShapeError, make_rng

# additive score for attention between tokens of different examples; exp() underflows to 0
_CROSS_EXAMPLE = -1e9


@dataclass
class FrozenLinear:
    """Linear layer with a frozen weight and an optional LoRA adapter.

    Inputs are batched along rows, so the layer computes ``x @ W0.T (+ x @ dW.T) + bias``.

    Attributes:
        weight (Matrix): p x q frozen weight W0
        bias (Matrix, optional): 1 x p frozen bias
        name (str): Layer identifier used as adapter target
        adapter (SparseLoraModule, optional): Attached adapter
    """
    weight: Matrix
    bias: Optional[Matrix] = None
    name: str = "linear"
    adapter: Optional[SparseLoraModule] = None

    @property
    def p(self) -> int:
        return self.weight.rows

    @property
    def q(self) -> int:
        return self.weight.cols

    def forward(self, x: Matrix) -> Matrix:
        if x.cols != self.q:
            raise ShapeError(f"{self.name}: input shape {x.shape} does not match weight shape {self.weight.shape}")
        out = matmul(x, transpose(self.weight))
        if self.adapter is not None:
            out = add(out, matmul(x, transpose(self.adapter.delta())))
        if self.bias is not None:
            out = add_bias(out, self.bias)
        return out

    def attach(self, adapter: SparseLoraModule) -> "FrozenLinear":
        if adapter.shape != self.weight.shape:
            raise ShapeError(f"{self.name}: adapter shape {adapter.shape} does not match weight {self.weight.shape}")
        if self.adapter is not None:
            raise ContractError(f"{self.name} already carries an adapter; merge or detach it first")
        self.adapter = adapter
        return self

    def detach(self) -> Optional[SparseLoraModule]:
        adapter, self.adapter = self.adapter, None
        return adapter

    def parameter_count(self) -> int:
        return self.p * self.q + (self.p if self.bias is not None else 0)


def merge_delta(layer: FrozenLinear) -> FrozenLinear:
    """Fold the attached adapter into the frozen weight and detach it.

    Raises:
        ContractError: If no adapter is attached
    """
    if layer.adapter is None:
        raise ContractError(f"{layer.name} has no adapter to merge")
    delta = layer.adapter.delta()
    layer.weight = Matrix(layer.weight.data + delta.data, name=layer.weight.name, dtype=layer.weight.dtype)
    layer.detach()
    return layer


@dataclass
class AttentionBlock:
    """Single-head self-attention over ``seq_len`` tokens of width ``dim`` with a residual.

    An input row of width seq_len * dim is one example; its tokens are consecutive slices.

    Attributes:
        query (FrozenLinear): dim x dim query projection
        key (FrozenLinear): dim x dim key projection
        value (FrozenLinear): dim x dim value projection
        seq_len (int): Tokens per example
        name (str): Block identifier
    """
    query: FrozenLinear
    key: FrozenLinear
    value: FrozenLinear
    seq_len: int
    name: str = "attn"
    _mask_cache: Dict[tuple, Matrix] = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.query.q

    @property
    def width(self) -> int:
        return self.seq_len * self.dim

    def projections(self) -> List[FrozenLinear]:
        return [self.query, self.key, self.value]

    def _block_mask(self, batch: int, dtype) -> Matrix:
        key = (batch, np.dtype(dtype).str)
        if key not in self._mask_cache:
            example = np.arange(batch * self.seq_len) // self.seq_len
            bits = np.where(example[:, None] == example[None, :], 0.0, _CROSS_EXAMPLE)
            self._mask_cache[key] = Matrix(bits, dtype=dtype)
        return self._mask_cache[key]

    def forward(self, x: Matrix) -> Matrix:
        if x.cols != self.width:
            raise ShapeError(f"{self.name}: input shape {x.shape} does not match width {self.width}")
        batch = x.rows
        tokens = reshape(x, batch * self.seq_len, self.dim)
        q = self.query.forward(tokens)
        k = self.key.forward(tokens)
        v = self.value.forward(tokens)
        scores = add(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(self.dim)), self._block_mask(batch, x.dtype))
        out = add(matmul(softmax_rows(scores), v), tokens)
        return reshape(out, batch, self.width)

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.projections())


Block = Union[FrozenLinear, AttentionBlock]


@dataclass
class TinyModel:
    """Frozen-base network with LoRA injection points.

    Attributes:
        blocks (List[Block]): Ordered layers; the activation follows every linear block but the last
        activation (Activation): Hidden nonlinearity
        loss_kind (LossKind): cross-entropy (labels) or MSE (real targets)
        adapter_targets (List[str], optional): Adapted layer names; None means every linear layer
    """
    blocks: List[Block]
    activation: Activation = Activation.RELU
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    adapter_targets: Optional[List[str]] = None

    def linear_layers(self) -> Dict[str, FrozenLinear]:
        layers = {}
        for block in self.blocks:
            for layer in (block.projections() if isinstance(block, AttentionBlock) else [block]):
                layers[layer.name] = layer
        return layers

    def layer(self, name: str) -> FrozenLinear:
        layers = self.linear_layers()
        if name not in layers:
            raise ContractError(f"unknown layer {name!r}; available: {', '.join(layers)}")
        return layers[name]

    def targets(self) -> List[str]:
        names = list(self.linear_layers())
        if self.adapter_targets is None:
            return names
        for name in self.adapter_targets:
            self.layer(name)
        return list(self.adapter_targets)

    @property
    def input_width(self) -> int:
        first = self.blocks[0]
        return first.width if isinstance(first, AttentionBlock) else first.q

    @property
    def output_width(self) -> int:
        last = self.blocks[-1]
        return last.width if isinstance(last, AttentionBlock) else last.p

    @property
    def output_layer(self) -> str:
        """Name of the last linear layer."""
        return list(self.linear_layers())[-1]

    @property
    def dtype(self):
        return next(iter(self.linear_layers().values())).weight.dtype

    def _activate(self, h: Matrix) -> Matrix:
        return relu(h) if self.activation == Activation.RELU else gelu(h)

    def forward(self, x: Matrix) -> Matrix:
        if x.cols != self.input_width:
            raise ShapeError(f"input shape {x.shape} does not match model input width {self.input_width}")
        h = x
        last = len(self.blocks) - 1
        for index, block in enumerate(self.blocks):
            h = block.forward(h)
            if isinstance(block, FrozenLinear) and index < last:
                h = self._activate(h)
        return h

    def loss(self, x: Matrix, y: Union[np.ndarray, Matrix]) -> Matrix:
        out = self.forward(x)
        if self.loss_kind == LossKind.CROSS_ENTROPY:
            return cross_entropy(out, np.asarray(y))
        target = y if isinstance(y, Matrix) else Matrix(y, dtype=out.dtype)
        return mse(out, target)

    def predict(self, x: Matrix) -> np.ndarray:
        out = self.forward(x).data
        if self.loss_kind == LossKind.CROSS_ENTROPY:
            return np.argmax(out, axis=1)
        return out.copy()

    def evaluate(self, x: Matrix, y: Union[np.ndarray, Matrix]) -> float:
        """Accuracy for classification, mean-squared error for regression."""
        predictions = self.predict(x)
        if self.loss_kind == LossKind.CROSS_ENTROPY:
            return float(np.mean(predictions == np.asarray(y).reshape(-1)))
        target = y.data if isinstance(y, Matrix) else np.asarray(y)
        return float(np.mean((predictions - target) ** 2))

    @property
    def higher_is_better(self) -> bool:
        return self.loss_kind == LossKind.CROSS_ENTROPY

    def parameter_count(self) -> int:
        return sum(block.parameter_count() for block in self.blocks)

    def attached_adapters(self) -> Dict[str, SparseLoraModule]:
        return {name: layer.adapter for name, layer in self.linear_layers().items() if layer.adapter is not None}

    def merge_all(self) -> List[str]:
        """Merge every attached adapter; returns the merged layer names."""
        merged = []
        for name, layer in self.linear_layers().items():
            if layer.adapter is not None:
                merge_delta(layer)
                merged.append(name)
        return merged

    def weights_digest(self) -> str:
        """sha256 over all frozen weight payloads, in layer order."""
        digest = hashlib.sha256()
        for name, layer in self.linear_layers().items():
            digest.update(name.encode("utf-8"))
            digest.update(layer.weight.data.tobytes())
            if layer.bias is not None:
                digest.update(layer.bias.data.tobytes())
        return digest.hexdigest()

    def copy(self) -> "TinyModel":
        """Independent model sharing the immutable weight tensors; adapters are not copied."""
        blocks = []
        for block in self.blocks:
            if isinstance(block, AttentionBlock):
                blocks.append(replace(
                    block,
                    query=replace(block.query, adapter=None),
                    key=replace(block.key, adapter=None),
                    value=replace(block.value, adapter=None),
                    _mask_cache={},
                ))
            else:
                blocks.append(replace(block, adapter=None))
        targets = list(self.adapter_targets) if self.adapter_targets is not None else None
        return TinyModel(blocks=blocks, activation=self.activation, loss_kind=self.loss_kind,
                         adapter_targets=targets)


def _frozen_linear(rng: np.random.Generator, p: int, q: int, name: str, bias: bool, dtype) -> FrozenLinear:
    std = 1.0 / math.sqrt(q)
    weight = Matrix(rng.normal(0.0, std, size=(p, q)), name=f"{name}.weight", dtype=dtype)
    b = Matrix(rng.normal(0.0, std, size=(1, p)), name=f"{name}.bias", dtype=dtype) if bias else None
    return FrozenLinear(weight=weight, bias=b, name=name)


def build_tiny_classifier(
        widths: Sequence[int],
        seed: int,
        activation: Activation = Activation.RELU,
        loss_kind: LossKind = LossKind.CROSS_ENTROPY,
        bias: bool = True,
        attention_seq_len: int = 0,
        adapter_targets: Optional[List[str]] = None,
        dtype=np.float64
) -> TinyModel:
    """Deterministically initialized tiny network.

    ``widths = [8, 16, 4]`` gives layers ``layer0`` (16 x 8) and ``layer1`` (4 x 16). Frozen
    weights are Gaussian with std 1/sqrt(fan_in). With ``attention_seq_len > 0`` an
    attention block over tokens of width ``widths[0] / attention_seq_len`` comes first; its
    projections are named ``attn.query``, ``attn.key`` and ``attn.value`` and carry no bias.

    Raises:
        ContractError: If widths is empty, has fewer than two entries, or holds a non-positive size
    """
    widths = list(widths)
    if not widths:
        raise ContractError("widths must not be empty")
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ContractError(f"widths must list at least two positive sizes, got {widths}")
    blocks: List[Block] = []
    if attention_seq_len > 0:
        if widths[0] % attention_seq_len:
            raise ContractError(f"input width {widths[0]} is not divisible by seq_len {attention_seq_len}")
        dim = widths[0] // attention_seq_len
        projections = [
            _frozen_linear(make_rng(seed, f"attn.{role}"), dim, dim, f"attn.{role}", False, dtype)
            for role in ("query", "key", "value")
        ]
        blocks.append(AttentionBlock(*projections, seq_len=attention_seq_len))
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        name = f"layer{index}"
        blocks.append(_frozen_linear(make_rng(seed, name), fan_out, fan_in, name, bias, dtype))
    model = TinyModel(blocks=blocks, activation=activation, loss_kind=loss_kind, adapter_targets=adapter_targets)
    model.targets()
    return model


def save_checkpoint(model: TinyModel, directory: Union[str, Path]) -> Path:
    """Write every tensor as TSR1 plus ``manifest.txt`` (layer order, shapes, adapters)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"activation: {model.activation.value}", f"loss: {model.loss_kind.value}"]
    if model.adapter_targets is not None:
        lines.append(f"targets: {','.join(model.adapter_targets)}")
    for block in model.blocks:
        if isinstance(block, AttentionBlock):
            lines.append(f"attention {block.name} seq_len={block.seq_len} dim={block.dim}")
            layers = block.projections()
        else:
            layers = [block]
        for layer in layers:
            save_tensor(directory / f"{layer.name}.weight.tsr", layer.weight)
            if layer.bias is not None:
                save_tensor(directory / f"{layer.name}.bias.tsr", layer.bias)
            adapter = "none"
            if layer.adapter is not None:
                save_adapter(layer.adapter, directory, prefix=f"{layer.name}.adapter")
                adapter = layer.adapter.stage.value
            lines.append(f"linear {layer.name} {layer.p}x{layer.q} "
                         f"bias={'yes' if layer.bias is not None else 'no'} adapter={adapter}")
    with open(directory / "manifest.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Saved checkpoint with {len(model.linear_layers())} linear layers to {directory}")
    return directory


def _load_linear(directory: Path, tokens: List[str], number: int) -> FrozenLinear:
    name, shape = tokens[1], tokens[2]
    options = dict(token.split("=", 1) for token in tokens[3:])
    weight = load_tensor(directory / f"{name}.weight.tsr", name=f"{name}.weight")
    if f"{weight.rows}x{weight.cols}" != shape:
        raise SchemaError(f"{name}: stored weight is {weight.shape}, manifest says {shape}", line=number)
    bias = load_tensor(directory / f"{name}.bias.tsr", name=f"{name}.bias") if options.get("bias") == "yes" else None
    layer = FrozenLinear(weight=weight, bias=bias, name=name)
    if options.get("adapter", "none") != "none":
        layer.attach(load_adapter(directory, prefix=f"{name}.adapter"))
    return layer


def load_checkpoint(directory: Union[str, Path]) -> TinyModel:
    """Inverse of save_checkpoint.

    Raises:
        SchemaError: If the manifest is malformed or disagrees with the stored tensors
    """
    directory = Path(directory)
    with open(directory / "manifest.txt", "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f]
    activation, loss_kind, targets = Activation.RELU, LossKind.CROSS_ENTROPY, None
    blocks: List[Block] = []
    pending_attention = None
    for number, line in enumerate(lines, 1):
        if not line:
            continue
        tokens = line.split()
        if line.startswith("activation:"):
            activation = Activation(line.split(":", 1)[1].strip())
        elif line.startswith("loss:"):
            loss_kind = LossKind(line.split(":", 1)[1].strip())
        elif line.startswith("targets:"):
            targets = [t for t in line.split(":", 1)[1].strip().split(",") if t]
        elif tokens[0] == "attention":
            options = dict(token.split("=", 1) for token in tokens[2:])
            pending_attention = (tokens[1], int(options["seq_len"]), [])
        elif tokens[0] == "linear":
            layer = _load_linear(directory, tokens, number)
            if pending_attention is not None:
                pending_attention[2].append(layer)
                if len(pending_attention[2]) == 3:
                    name, seq_len, projections = pending_attention
                    blocks.append(AttentionBlock(*projections, seq_len=seq_len, name=name))
                    pending_attention = None
            else:
                blocks.append(layer)
        else:
            raise SchemaError(f"unrecognized manifest entry {line!r}", line=number)
    if not blocks or pending_attention is not None:
        raise SchemaError(f"{directory}/manifest.txt describes an incomplete model")
    return TinyModel(blocks=blocks, activation=activation, loss_kind=loss_kind, adapter_targets=targets)
