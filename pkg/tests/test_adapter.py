import pytest
import torch
import torch.nn.functional as F

from duet.adapter import EncoderAdapter, TokenSequence
from duet.backbone import BACKBONES, build_backbone
from duet.errors import ConfigError, InputError

from conftest import rand_image


def test_identical_images_identical_features(tiny_adapter):
    img = rand_image(tiny_adapter, seed=1)
    a = tiny_adapter.encode_image(img)
    b = tiny_adapter.encode_image(img.clone())
    assert torch.equal(a.global_, b.global_)
    assert torch.equal(a.patches, b.patches)


def test_patch_shape_matches_config(tiny_adapter):
    cfg = tiny_adapter.config
    feat = tiny_adapter.encode_image(rand_image(tiny_adapter))
    assert feat.patches.shape == (cfg.patch_count, cfg.embed_dim)
    assert feat.global_.shape == (cfg.embed_dim,)


def test_paper_scale_config_dimensions():
    cfg = BACKBONES["vit-l-14"]
    assert cfg.embed_dim == 768
    assert cfg.patch_count == (224 // 14) ** 2


def test_single_pixel_perturbation_stability(tiny_adapter):
    img = rand_image(tiny_adapter, seed=2)
    perturbed = img.clone()
    perturbed[0, 5, 5] += 0.01
    a = tiny_adapter.encode_image(img).global_
    b = tiny_adapter.encode_image(perturbed).global_
    cos = F.cosine_similarity(a, b, dim=0)
    assert cos > 0.99


def test_wrong_spatial_size_rejected(tiny_adapter):
    with pytest.raises(ConfigError):
        tiny_adapter.encode_image(torch.rand(3, 16, 16))


def test_nan_input_rejected(tiny_adapter):
    img = rand_image(tiny_adapter)
    img[0, 0, 0] = float("nan")
    with pytest.raises(InputError):
        tiny_adapter.encode_image(img)


def test_embed_words_empty_rejected(tiny_adapter):
    with pytest.raises(InputError):
        tiny_adapter.embed_words("")


def test_embed_words_token_count(tiny_adapter):
    seq = tiny_adapter.embed_words("a photo of")
    expected = tiny_adapter.backbone.tokenizer.count("a photo of")
    assert seq.length == expected


def test_embed_words_deterministic(tiny_adapter):
    a = tiny_adapter.embed_words("same string").embeddings
    b = tiny_adapter.embed_words("same string").embeddings
    assert torch.equal(a, b)


def test_encode_sequence_matches_reference_pipeline(tiny_adapter):
    text = "a photo of a shoe"
    via_embed = tiny_adapter.encode_sequence(tiny_adapter.embed_words(text))
    via_reference = tiny_adapter.encode_text(text)
    cos = F.cosine_similarity(via_embed, via_reference, dim=0)
    assert cos >= 0.999


def test_encode_sequence_deterministic(tiny_adapter):
    seq = tiny_adapter.embed_words("a sparse diagram")
    assert torch.equal(tiny_adapter.encode_sequence(seq),
                       tiny_adapter.encode_sequence(seq))


def test_different_phrases_different_outputs(tiny_adapter):
    a = tiny_adapter.encode_sequence(tiny_adapter.embed_words("in abstract lines"))
    b = tiny_adapter.encode_sequence(tiny_adapter.embed_words("as sparse contours"))
    assert not torch.allclose(a, b)


def test_overlength_sequence_rejected(tiny_adapter):
    width = tiny_adapter.config.text_width
    too_long = TokenSequence(torch.zeros(tiny_adapter.config.context_length, width))
    with pytest.raises(ConfigError):
        tiny_adapter.encode_sequence(too_long)


def test_trainable_parameters_are_vision_layernorms_only(tiny_adapter):
    trainable = tiny_adapter.trainable_parameters()
    assert trainable
    assert all(name.startswith("visual.") and ("ln" in name or "norm" in name.lower())
               for name in trainable)
    tr_count, total = tiny_adapter.parameter_counts()
    assert tr_count / total < 0.01
    # text transformer parameters are all frozen
    for name, p in tiny_adapter.backbone.text.named_parameters():
        assert not p.requires_grad, name


def test_gradient_mask(tiny_adapter):
    tiny_adapter.train_mode()
    try:
        img = rand_image(tiny_adapter, seed=3)
        globals_, _ = tiny_adapter.encode_images(img[None])
        loss = globals_.square().sum()
        loss.backward()
        ln_grads = [p.grad for p in tiny_adapter.trainable_parameters().values()]
        assert any(g is not None and g.abs().sum() > 0 for g in ln_grads)
        for name, p in tiny_adapter.frozen_parameters().items():
            assert p.grad is None, name
    finally:
        for p in tiny_adapter.backbone.parameters():
            p.grad = None
        tiny_adapter.eval_mode()


def test_unknown_backbone_rejected():
    with pytest.raises(ConfigError):
        build_backbone("nope")
