"""Record per-token module outputs of a causal LM into dump files.

Forward hooks attach to every trainable module matched by the include
rules (attention and MLP projections, norms, token embedding, LM head).
Each dataset sample is a {prompt, answer} pair; the chat template turns
it into token ids and an answer span, and the recorder writes one frame
per token in module-table order. A reduced mode runs two sibling models
sample by sample and accumulates per-channel absolute differences
directly, so large corpora never need full dumps on disk.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import DumpWriter, hash_token_ids, write_diff_file

logger = logging.getLogger(__name__)

ROLE_PROMPT = "P"
ROLE_ANSWER = "A"

# suffix -> channel dimension resolver; mirrors the analysis toolkit's
# channel semantics (linear/head: rows, embedding: hidden columns, norm:
# scale elements)
DEFAULT_INCLUDE_SUFFIXES = (
    "q_proj", "k_proj", "v_proj", "o_proj",
    "gate_proj", "up_proj", "down_proj",
    "embed_tokens", "lm_head",
    "input_layernorm", "post_attention_layernorm", "norm",
)


@dataclass
class CaptureConfig:
    model: str
    dataset: str
    template: str = "plain"
    include_suffixes: tuple[str, ...] = DEFAULT_INCLUDE_SUFFIXES
    value_dtype: str = "F32"
    max_tokens: int = 512
    role_filter: str = "all"  # used by the reduced mode
    device: str = "cpu"
    extra: dict = field(default_factory=dict)


def load_dataset(path) -> list[dict]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "prompt" not in record or "answer" not in record:
                raise ValueError(f"{path}:{line_no}: sample needs prompt and answer")
            samples.append(record)
    if not samples:
        raise ValueError(f"{path}: empty dataset")
    return samples


class ByteTokenizer:
    """Fallback tokenizer: UTF-8 bytes as token ids.

    Deterministic and file-free, which keeps sibling captures aligned when
    the checkpoint directory ships no tokenizer (tiny test models). Any
    model with vocab >= 256 can consume it.
    """

    def __call__(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))


def _resolve_tokenizer(model_path: str):
    try:
        from transformers import AutoTokenizer

        tok = AutoTokenizer.from_pretrained(model_path)
        logger.info("using model tokenizer from %s", model_path)
        return lambda text: tok(text, add_special_tokens=False)["input_ids"]
    except Exception:
        logger.info("no tokenizer at %s, falling back to byte tokenizer", model_path)
        return ByteTokenizer()


def apply_template(template: str, tokenize, prompt: str, answer: str,
                   max_tokens: int) -> tuple[list[int], str]:
    """Token ids plus one role char per token; answer tokens carry 'A'."""
    if template == "plain":
        prompt_text, answer_text = prompt, answer
    elif template == "chatml":
        prompt_text = f"<|user|>\n{prompt}\n<|assistant|>\n"
        answer_text = answer
    else:
        raise ValueError(f"unknown chat template {template!r}")
    prompt_ids = tokenize(prompt_text)
    answer_ids = tokenize(answer_text)
    ids = (prompt_ids + answer_ids)[:max_tokens]
    n_prompt = min(len(prompt_ids), len(ids))
    roles = ROLE_PROMPT * n_prompt + ROLE_ANSWER * (len(ids) - n_prompt)
    return ids, roles


@dataclass
class ResolvedModule:
    path: str
    n_channels: int
    module: torch.nn.Module


def resolve_modules(model: torch.nn.Module, include_suffixes) -> list[ResolvedModule]:
    """Trainable modules to record, in definition order, with channel counts
    read off the weight shapes before any frame is written."""
    resolved = []
    for name, module in model.named_modules():
        last = name.rsplit(".", 1)[-1]
        if last not in include_suffixes:
            continue
        if isinstance(module, torch.nn.Embedding):
            n_channels = module.weight.shape[1]
        elif isinstance(module, torch.nn.Linear):
            n_channels = module.weight.shape[0]
        elif hasattr(module, "weight") and module.weight is not None and module.weight.dim() == 1:
            n_channels = module.weight.shape[0]  # norm scale
        else:
            raise ValueError(f"cannot resolve channel count for module {name!r}")
        resolved.append(ResolvedModule(name, int(n_channels), module))
    if not resolved:
        raise ValueError("include rules matched no modules")
    return resolved


class _Recorder:
    """Forward hooks that stash each recorded module's output per call."""

    def __init__(self, modules: list[ResolvedModule]):
        self.modules = modules
        self.outputs: dict[str, torch.Tensor] = {}
        self._handles = []

    def __enter__(self):
        for entry in self.modules:
            self._handles.append(
                entry.module.register_forward_hook(self._hook_for(entry.path))
            )
        return self

    def _hook_for(self, name):
        def hook(module, args, output):
            tensor = output[0] if isinstance(output, tuple) else output
            self.outputs[name] = tensor.detach()

        return hook

    def frames(self, n_tokens: int) -> np.ndarray:
        """(tokens, frame_len) float32 matrix in module-table order."""
        pieces = []
        for entry in self.modules:
            out = self.outputs[entry.path]
            if out.dim() != 3 or out.shape[1] != n_tokens or out.shape[2] != entry.n_channels:
                raise ValueError(
                    f"{entry.path}: unexpected output shape {tuple(out.shape)}"
                )
            pieces.append(out[0].to(torch.float32).cpu().numpy())
        return np.concatenate(pieces, axis=1)

    def __exit__(self, exc_type, exc, tb):
        for handle in self._handles:
            handle.remove()


def _load_model(config: CaptureConfig):
    from transformers import AutoModelForCausalLM

    try:
        model = AutoModelForCausalLM.from_pretrained(config.model)
    except (OSError, RuntimeError, torch.cuda.OutOfMemoryError) as exc:
        raise RuntimeError(
            f"could not load {config.model!r}: {exc}. For large models run on a "
            "machine with enough RAM or pass a smaller checkpoint."
        ) from exc
    return model.to(config.device).eval()


def _tokenized_corpus(config: CaptureConfig, tokenize):
    samples = load_dataset(config.dataset)
    per_sample = []
    all_ids: list[int] = []
    all_roles: list[str] = []
    for sample in samples:
        ids, roles = apply_template(
            config.template, tokenize, sample["prompt"], sample["answer"], config.max_tokens
        )
        if not ids:
            continue
        per_sample.append((ids, roles))
        all_ids.extend(ids)
        all_roles.append(roles)
    if not all_ids:
        raise ValueError("dataset tokenized to zero tokens")
    return per_sample, all_ids, "".join(all_roles)


def capture(config: CaptureConfig, out_path) -> Path:
    """Run one model over the dataset and write a conforming ACTD dump."""
    model = _load_model(config)
    tokenize = _resolve_tokenizer(config.model)
    modules = resolve_modules(model, config.include_suffixes)
    per_sample, all_ids, all_roles = _tokenized_corpus(config, tokenize)
    logger.info(
        "capturing %d modules, %d tokens from %d samples",
        len(modules), len(all_ids), len(per_sample),
    )

    writer = DumpWriter(
        out_path,
        model_id=str(config.model),
        input_set_hash=hash_token_ids(all_ids),
        module_table=[(m.path, m.n_channels) for m in modules],
        token_count=len(all_ids),
        token_roles=all_roles,
        value_dtype=config.value_dtype,
    )
    with writer, _Recorder(modules) as recorder, torch.no_grad():
        for ids, _ in per_sample:
            model(torch.tensor([ids], device=config.device))
            for frame in recorder.frames(len(ids)):
                writer.write_frame(frame)
    return Path(out_path)


def capture_reduced(config_a: CaptureConfig, config_b: CaptureConfig, out_path) -> Path:
    """Run two sibling models in lockstep and write the reduced ACTR file.

    Per-channel sums accumulate in float64 in token order, matching the
    offline two-dump reduction to accumulation tolerance. Both configs must
    name the same dataset and tokenize identically.
    """
    if config_a.dataset != config_b.dataset:
        raise ValueError("reduced capture requires the identical dataset file")
    if config_a.template != config_b.template:
        raise ValueError("reduced capture requires the same chat template")
    tokenize_a = _resolve_tokenizer(config_a.model)
    tokenize_b = _resolve_tokenizer(config_b.model)
    per_sample, all_ids, all_roles = _tokenized_corpus(config_a, tokenize_a)
    check_sample, check_ids, _ = _tokenized_corpus(config_b, tokenize_b)
    if check_ids != all_ids:
        raise ValueError("models tokenize the dataset differently; captures cannot align")
    del check_sample

    model_a = _load_model(config_a)
    model_b = _load_model(config_b)
    modules_a = resolve_modules(model_a, config_a.include_suffixes)
    modules_b = resolve_modules(model_b, config_b.include_suffixes)
    table_a = [(m.path, m.n_channels) for m in modules_a]
    table_b = [(m.path, m.n_channels) for m in modules_b]
    if table_a != table_b:
        raise ValueError("models resolve different module tables")

    role_filter = config_a.role_filter
    frame_len = sum(n for _, n in table_a)
    sums = np.zeros(frame_len, dtype=np.float64)
    kept_tokens = 0
    with _Recorder(modules_a) as rec_a, _Recorder(modules_b) as rec_b, torch.no_grad():
        for ids, roles in per_sample:
            batch = torch.tensor([ids])
            model_a(batch.to(config_a.device))
            model_b(batch.to(config_b.device))
            frames_a = rec_a.frames(len(ids))
            frames_b = rec_b.frames(len(ids))
            for t, role in enumerate(roles):
                if role_filter == "answer" and role != ROLE_ANSWER:
                    continue
                sums += np.abs(
                    frames_a[t].astype(np.float64) - frames_b[t].astype(np.float64)
                )
                kept_tokens += 1
    counts = np.full(frame_len, kept_tokens, dtype=np.uint64)
    return write_diff_file(
        out_path,
        model_ids=(str(config_a.model), str(config_b.model)),
        input_set_hash=hash_token_ids(all_ids),
        role_filter=role_filter,
        module_table=table_a,
        sums=sums,
        counts=counts,
    )
