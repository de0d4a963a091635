#!/usr/bin/env python3
"""Reads one sentence per line on stdin, writes one JSON vector per line.

Use as the `command` encoder:

    [encoder]
    kind = "command"
    id = "biomedbert-cls"
    dim = 768
    program = "python3"
    args = ["scripts/encode_sentences.py", "--model", "microsoft/BiomedNLP-BiomedBERT-base-uncased-abstract-fulltext"]
"""
import argparse
import json
import sys

import torch
from transformers import AutoModel, AutoTokenizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", required=True)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--max-length", type=int, default=128)
    args = ap.parse_args()

    tok = AutoTokenizer.from_pretrained(args.model)
    model = AutoModel.from_pretrained(args.model).eval()
    sentences = sys.stdin.read().splitlines()
    out = sys.stdout
    with torch.no_grad():
        for i in range(0, len(sentences), args.batch_size):
            batch = tok(
                sentences[i : i + args.batch_size],
                padding=True,
                truncation=True,
                max_length=args.max_length,
                return_tensors="pt",
            )
            cls = model(**batch).last_hidden_state[:, 0, :]
            for row in cls.tolist():
                out.write(json.dumps(row) + "\n")
    out.flush()


if __name__ == "__main__":
    main()
