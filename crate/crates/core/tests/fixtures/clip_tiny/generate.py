"""Builds the tiny random-weight CLIP fixture and its reference outputs.

Run from this directory: python3 generate.py
"""
import json

import torch
from safetensors.torch import save_file
from transformers import CLIPConfig, CLIPModel, CLIPTokenizer


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return [chr(c) for c in cs]


MERGES = [
    "o f</w>", "p h", "ph o", "pho t", "phot o</w>", "u n", "k n", "kn o", "kno w", "know n</w>",
    "un known</w>", "b a", "ba c", "bac k</w>", "p a", "pa c", "pac k</w>", "s p", "o r", "or t", "ort s</w>",
    "sp orts</w>", "c a", "ca r</w>", "m u", "mu g</w>", "t r", "tr e", "tre e</w>", "b i", "bi r", "bir d</w>",
    "l a", "la m", "lam p</w>", "d e", "de s", "des k</w>",
]


def write_tokenizer():
    chars = bytes_to_unicode()
    vocab = chars + [c + "</w>" for c in chars]
    for m in MERGES:
        vocab.append(m.replace(" ", ""))
    vocab += ["<|startoftext|>", "<|endoftext|>"]
    with open("vocab.json", "w") as f:
        json.dump({t: i for i, t in enumerate(vocab)}, f, ensure_ascii=False)
    with open("merges.txt", "w") as f:
        f.write("#version: 0.2\n" + "\n".join(MERGES) + "\n")
    return len(vocab)


def main():
    torch.manual_seed(0)
    vocab_size = write_tokenizer()
    config = CLIPConfig(
        text_config=dict(
            vocab_size=vocab_size, hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=4,
            max_position_embeddings=77, hidden_act="quick_gelu", bos_token_id=vocab_size - 2,
            eos_token_id=vocab_size - 1, pad_token_id=vocab_size - 1,
        ),
        vision_config=dict(
            hidden_size=40, intermediate_size=80, num_hidden_layers=2, num_attention_heads=5, image_size=32,
            patch_size=8, hidden_act="quick_gelu",
        ),
        projection_dim=24,
    )
    model = CLIPModel(config).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    model.save_pretrained(".", safe_serialization=True)

    tok = CLIPTokenizer("vocab.json", "merges.txt")
    strings = ["a photo of a", "back pack", "unknown.", "sports car", "Hello, World!", "mug's 42 lamps"]
    tokens = {s: tok(s, add_special_tokens=False)["input_ids"] for s in strings}
    sot, eot = vocab_size - 2, vocab_size - 1

    def text_features(ids):
        return model.get_text_features(input_ids=torch.tensor([[sot] + ids + [eot]])).pooler_output[0] \
            if hasattr(model.get_text_features(input_ids=torch.tensor([[sot] + ids + [eot]])), "pooler_output") \
            else model.get_text_features(input_ids=torch.tensor([[sot] + ids + [eot]]))[0]

    prompts = {}
    for s in ["a photo of a", "back pack", "unknown.", "sports car"]:
        prompts[s] = text_features(tokens[s]).tolist()

    # Gradient of <c, normalize(text_features)> with respect to the content token embeddings.
    ids = tokens["a photo of a"] + tokens["back pack"]
    cotangent = torch.randn(24)
    captured = {}

    def hook(_module, _inputs, output):
        output.retain_grad()
        captured["emb"] = output
        return output

    handle = model.text_model.embeddings.token_embedding.register_forward_hook(hook)
    feats = text_features(ids)
    (feats / feats.norm()).dot(cotangent).backward()
    handle.remove()
    grad = captured["emb"].grad[0, 1:-1].tolist()

    pixels = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        out = model.get_image_features(pixel_values=pixels)
        image = (out.pooler_output if hasattr(out, "pooler_output") else out)[0].tolist()

    reference = dict(
        tokens=tokens, prompts=prompts, grad_ids=ids, cotangent=cotangent.tolist(), grad=grad,
        pixels=pixels[0].flatten().tolist(), image_features=image,
    )
    with open("reference.json", "w") as f:
        json.dump(reference, f)

    # Same weights under the original OpenAI/OpenCLIP names.
    sd = {k: v.detach().clone() for k, v in model.state_dict().items()}
    oa = {}

    def blocks(prefix_in, prefix_out, n):
        for i in range(n):
            a = f"{prefix_in}.encoder.layers.{i}"
            b = f"{prefix_out}.resblocks.{i}"
            oa[f"{b}.attn.in_proj_weight"] = torch.cat([sd[f"{a}.self_attn.{x}_proj.weight"] for x in "qkv"])
            oa[f"{b}.attn.in_proj_bias"] = torch.cat([sd[f"{a}.self_attn.{x}_proj.bias"] for x in "qkv"])
            oa[f"{b}.attn.out_proj.weight"] = sd[f"{a}.self_attn.out_proj.weight"]
            oa[f"{b}.attn.out_proj.bias"] = sd[f"{a}.self_attn.out_proj.bias"]
            for x, y in [("layer_norm1", "ln_1"), ("layer_norm2", "ln_2")]:
                oa[f"{b}.{y}.weight"] = sd[f"{a}.{x}.weight"]
                oa[f"{b}.{y}.bias"] = sd[f"{a}.{x}.bias"]
            for x, y in [("fc1", "c_fc"), ("fc2", "c_proj")]:
                oa[f"{b}.mlp.{y}.weight"] = sd[f"{a}.mlp.{x}.weight"]
                oa[f"{b}.mlp.{y}.bias"] = sd[f"{a}.mlp.{x}.bias"]

    blocks("text_model", "transformer", 2)
    oa["token_embedding.weight"] = sd["text_model.embeddings.token_embedding.weight"]
    oa["positional_embedding"] = sd["text_model.embeddings.position_embedding.weight"]
    oa["ln_final.weight"] = sd["text_model.final_layer_norm.weight"]
    oa["ln_final.bias"] = sd["text_model.final_layer_norm.bias"]
    oa["text_projection"] = sd["text_projection.weight"].t().contiguous()
    text_only = dict(oa)
    blocks("vision_model", "visual.transformer", 2)
    oa["visual.conv1.weight"] = sd["vision_model.embeddings.patch_embedding.weight"]
    oa["visual.class_embedding"] = sd["vision_model.embeddings.class_embedding"]
    oa["visual.positional_embedding"] = sd["vision_model.embeddings.position_embedding.weight"]
    for x, y in [("pre_layrnorm", "ln_pre"), ("post_layernorm", "ln_post")]:
        oa[f"visual.{y}.weight"] = sd[f"vision_model.{x}.weight"]
        oa[f"visual.{y}.bias"] = sd[f"vision_model.{x}.bias"]
    oa["visual.proj"] = sd["visual_projection.weight"].t().contiguous()
    oa["logit_scale"] = sd["logit_scale"]
    save_file({k: v.contiguous() for k, v in oa.items()}, "openai_layout.safetensors")

    # A ResNet-style checkpoint: text tower plus the attention-pool projection only.
    rn = dict(text_only)
    rn["visual.attnpool.c_proj.weight"] = torch.randn(24, 48) * 0.05
    rn["visual.attnpool.c_proj.bias"] = torch.zeros(24)
    rn["visual.layer1.0.conv1.weight"] = torch.randn(4, 4, 1, 1) * 0.05
    save_file({k: v.contiguous() for k, v in rn.items()}, "resnet_layout.safetensors")


if __name__ == "__main__":
    main()
