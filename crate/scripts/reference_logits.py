"""Reference final-position logits from the Hugging Face GPT-2 implementation.

Loads a GPT-2 Small safetensors checkpoint (for example the synthetic one
written by `cargo run --release --example export_synthetic`), tokenizes the
prompts in prompts.json with the `tokenizers` byte-level BPE, and writes

    prompts.json   (ids added next to each text)
    logits.f32     (little-endian f32, one row of n_vocab per prompt)

Requires: torch, transformers, safetensors, tokenizers.
"""

import argparse
import json
import pathlib

import numpy as np
import torch
from safetensors.torch import load_file
from tokenizers import Tokenizer, decoders, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel

BOS = 50256


def tokenizer(assets):
    bpe = models.BPE.from_file(str(assets / "vocab.json"), str(assets / "merges.txt"))
    tok = Tokenizer(bpe)
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    return tok


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--weights", required=True, type=pathlib.Path)
    ap.add_argument("--assets", default="assets/gpt2", type=pathlib.Path)
    ap.add_argument("--fixture", default="crates/core/tests/fixtures/parity", type=pathlib.Path)
    args = ap.parse_args()

    spec_path = args.fixture / "prompts.json"
    spec = json.loads(spec_path.read_text())
    texts = [p if isinstance(p, str) else p["text"] for p in spec["prompts"]]

    config = GPT2Config(activation_function="gelu_new", layer_norm_epsilon=1e-5)
    model = GPT2LMHeadModel(config)
    state = {f"transformer.{k}": v for k, v in load_file(str(args.weights)).items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    assert not unexpected, unexpected
    assert all(".attn.bias" in m or ".attn.masked_bias" in m or m == "lm_head.weight" for m in missing), missing
    model.tie_weights()
    model.eval()

    tok = tokenizer(args.assets)
    rows, prompts = [], []
    with torch.no_grad():
        for text in texts:
            ids = ([BOS] if spec.get("bos", True) else []) + tok.encode(text).ids
            logits = model(torch.tensor([ids])).logits[0, -1].to(torch.float32).numpy()
            top = np.sort(logits)[-2:]
            print(f"{len(ids):4d} tokens  argmax {int(logits.argmax()):5d}  top-2 gap {top[1] - top[0]:.4f}")
            rows.append(logits)
            prompts.append({"text": text, "ids": ids})

    spec["prompts"] = prompts
    spec_path.write_text(json.dumps(spec, indent=2) + "\n")
    np.stack(rows).astype("<f4").tofile(args.fixture / "logits.f32")


if __name__ == "__main__":
    main()
