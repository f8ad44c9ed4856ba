"""Fixtures: a 50-document corpus built by the main package's CLI, and a
tiny randomly initialized 12-layer masked LM whose vocabulary covers the
corpus except for two words (one multi-piece, one unknown) that exercise the
skip accounting."""

import json
import subprocess
import sys
from pathlib import Path

import pytest
import torch
from transformers import BertConfig, BertForMaskedLM, BertTokenizerFast

N_DOCS = 50


def run_bknn(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "bknn.cli", *args],
                          capture_output=True, text=True)


@pytest.fixture(scope="session")
def workspace(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("sidecar")
    docs = []
    for i in range(N_DOCS):
        subject = f"entity{i} tag{i}"
        text = f"{subject} was born in city{i}. {subject} lived a long life."
        if i == 0:
            # "multipart" splits into two model pieces, "mysteryword" is
            # outside the model vocabulary entirely
            text += " A multipart mysteryword ends this."
        docs.append({"title": subject, "text": text})
    corpus_jsonl = root / "docs.jsonl"
    corpus_jsonl.write_text("".join(json.dumps(d) + "\n" for d in docs))
    proc = run_bknn("ingest", "--corpus", str(corpus_jsonl),
                    "--out", str(root / "corpus"))
    assert proc.returncode == 0, proc.stderr

    rows = []
    for i in range(N_DOCS):
        rows.append({"query_id": f"q{i:03d}",
                     "masked_text": f"entity{i} tag{i} was born in [MASK].",
                     "subject": f"entity{i} tag{i}",
                     "answer": f"city{i}", "relation": "born_in"})
    # eval.jsonl holds only well-formed rows; queries.jsonl adds one with no
    # mask marker to exercise the sidecar's flag accounting
    (root / "eval.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    rows.append({"query_id": "flagged", "masked_text": "no mask marker here",
                 "answer": "city0", "relation": "born_in"})
    (root / "queries.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    (root / "candidates.txt").write_text(
        "".join(f"city{i}\n" for i in range(N_DOCS)) + "multipart\n")
    return root


@pytest.fixture(scope="session")
def model_dir(workspace, tmp_path_factory) -> Path:
    corpus_vocab = (workspace / "corpus" / "vocab.txt").read_text().splitlines()
    specials = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    words = [w for w in corpus_vocab if w not in ("multipart", "mysteryword")]
    vocab = {w: i for i, w in enumerate(specials + words + ["multi", "##part"])}
    tokenizer = BertTokenizerFast(vocab=vocab, do_lower_case=True)
    torch.manual_seed(7)
    config = BertConfig(vocab_size=len(vocab), hidden_size=32,
                        num_hidden_layers=12, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=64)
    model = BertForMaskedLM(config)
    out = tmp_path_factory.mktemp("model") / "tiny"
    model.save_pretrained(out)
    tokenizer.save_pretrained(out)
    return out
