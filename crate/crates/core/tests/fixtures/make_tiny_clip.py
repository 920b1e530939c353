"""Builds the tiny CLIP-shaped export used by the local backend tests.

Writes tiny_clip/ (manifest, two ONNX graphs, BPE vocabulary and merges),
probe images, and expected.json holding reference token ids (from the
transformers CLIP tokenizer) and reference pre-normalization embeddings
(from torch with torchvision preprocessing).

    python3 make_tiny_clip.py
"""

import collections
import json
import os
import re

import numpy as np
import torch
from PIL import Image
from torchvision import transforms
from transformers import CLIPTokenizer

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "tiny_clip")
PROBES = os.path.join(HERE, "probes")
DIM = 32
CONTEXT = 77
N_MERGES = 300

CORPUS = """
a photo of a cat. a photo of a dog. a photo of a golden retriever on the grass.
a plate of grated cocoyam wrapped in leaves. a bowl of jollof rice with chicken.
the quick brown fox jumps over the lazy dog. an aerial view of a parking lot.
a satellite image of farmland with irrigation circles. a close-up photo of a bird.
it's a painting of a tabby cat that's sleeping on the sofa. they've eaten already.
"""

TEXT_PROBES = [
    "a photo of a cat",
    "A Photo Of A Dog",
    "a golden retriever on the grass!",
    "it's a plate of jollof rice, isn't it?",
    "an aerial   view\tof a parking lot",
    "zebra crossing 12345",
    "Ekwang",
    "",
    " ".join(["word"] * 100),
    "café naïve",
]


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


PAT = re.compile(r"""'s|'t|'re|'ve|'m|'ll|'d|[a-zA-Z]+|[0-9]|[^\sa-zA-Z0-9]+""", re.IGNORECASE)


def learn_merges(text, n_merges):
    b2u = bytes_to_unicode()
    words = collections.Counter()
    for tok in PAT.findall(text.lower()):
        sym = [b2u[b] for b in tok.encode("utf-8")]
        sym[-1] = sym[-1] + "</w>"
        words[tuple(sym)] += 1
    merges = []
    for _ in range(n_merges):
        pairs = collections.Counter()
        for w, c in words.items():
            for p in zip(w, w[1:]):
                pairs[p] += c
        if not pairs:
            break
        best = max(pairs.items(), key=lambda kv: (kv[1], kv[0]))[0]
        merges.append(best)
        new_words = collections.Counter()
        for w, c in words.items():
            out, i = [], 0
            while i < len(w):
                if i < len(w) - 1 and (w[i], w[i + 1]) == best:
                    out.append(w[i] + w[i + 1])
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new_words[tuple(out)] += c
        words = new_words
    return merges


def write_tokenizer():
    merges = learn_merges(CORPUS, N_MERGES)
    vocab = list(bytes_to_unicode().values())
    vocab = vocab + [v + "</w>" for v in vocab]
    vocab += ["".join(m) for m in merges]
    vocab += ["<|startoftext|>", "<|endoftext|>"]
    ids = {tok: i for i, tok in enumerate(vocab)}
    with open(os.path.join(OUT, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump(ids, f, ensure_ascii=False, indent=0, sort_keys=True)
    with open(os.path.join(OUT, "merges.txt"), "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")
    return len(vocab)


class ImageEncoder(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.patch = torch.nn.Conv2d(3, 16, kernel_size=16, stride=16)
        self.proj = torch.nn.Linear(16, DIM)

    def forward(self, x):
        h = torch.tanh(self.patch(x)).mean(dim=(2, 3))
        return self.proj(h)


class TextEncoder(torch.nn.Module):
    def __init__(self, vocab_size):
        super().__init__()
        self.embed = torch.nn.Embedding(vocab_size, 24)
        self.pos = torch.nn.Parameter(torch.randn(CONTEXT, 24) * 0.1)
        self.mix = torch.nn.Linear(24, 24)
        self.proj = torch.nn.Linear(24, DIM)

    def forward(self, ids):
        h = self.embed(ids) + self.pos
        h = torch.tanh(self.mix(h)).cumsum(dim=1)
        # read out at the end-of-text token, which has the largest id
        eot = ids[0].argmax(dim=-1, keepdim=True)
        return self.proj(h[0].index_select(0, eot))


def probe_images():
    rng = np.random.default_rng(7)
    os.makedirs(PROBES, exist_ok=True)
    specs = [("wide.png", 320, 200), ("tall.png", 150, 260), ("square.png", 224, 224), ("small.png", 60, 90)]
    names = []
    for name, w, h in specs:
        yy, xx = np.mgrid[0:h, 0:w]
        base = np.stack([xx / w, yy / h, (xx + yy) / (w + h)], axis=-1) * 200
        img = np.clip(base + rng.normal(0, 20, size=(h, w, 3)), 0, 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(os.path.join(PROBES, name))
        names.append(name)
    Image.fromarray(np.full((40, 40, 3), 90, np.uint8), "RGB").save(os.path.join(PROBES, "flat.jpg"), quality=95)
    names.append("flat.jpg")
    return names


def main():
    torch.manual_seed(0)
    os.makedirs(OUT, exist_ok=True)
    vocab_size = write_tokenizer()
    image_model = ImageEncoder().eval()
    text_model = TextEncoder(vocab_size).eval()
    torch.onnx.export(image_model, torch.zeros(1, 3, 224, 224), os.path.join(OUT, "image.onnx"),
                      input_names=["pixel_values"], output_names=["image_embeds"],
                      opset_version=13, dynamo=False)
    torch.onnx.export(text_model, torch.zeros(1, CONTEXT, dtype=torch.int64), os.path.join(OUT, "text.onnx"),
                      input_names=["input_ids"], output_names=["text_embeds"],
                      opset_version=13, dynamo=False)
    manifest = {
        "model_id": "tiny-clip-test",
        "dim": DIM,
        "files": {
            "image_encoder": "image.onnx",
            "text_encoder": "text.onnx",
            "tokenizer_vocab": "vocab.json",
            "tokenizer_merges": "merges.txt",
        },
        "preprocess_id": "clip-224-bicubic",
    }
    with open(os.path.join(OUT, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    tok = CLIPTokenizer(os.path.join(OUT, "vocab.json"), os.path.join(OUT, "merges.txt"))
    texts = []
    for t in TEXT_PROBES:
        ids = tok(t, max_length=CONTEXT, truncation=True)["input_ids"]
        # pad with id 0 after the end token, as open_clip does
        ids = ids + [0] * (CONTEXT - len(ids))
        with torch.no_grad():
            emb = text_model(torch.tensor([ids], dtype=torch.int64))[0].tolist()
        texts.append({"text": t, "ids": ids, "embedding": emb})

    pre = transforms.Compose([
        transforms.Resize(224, interpolation=transforms.InterpolationMode.BICUBIC),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize((0.48145466, 0.4578275, 0.40821073), (0.26862954, 0.26130258, 0.27577711)),
    ])
    images = []
    for name in probe_images():
        x = pre(Image.open(os.path.join(PROBES, name)).convert("RGB")).unsqueeze(0)
        with torch.no_grad():
            emb = image_model(x)[0].tolist()
        images.append({"file": name, "embedding": emb, "pixel_checksum": float(x.double().sum())})

    with open(os.path.join(HERE, "expected.json"), "w") as f:
        json.dump({"texts": texts, "images": images}, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
