import struct

import pytest
import torch

from zsad.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from zsad.cli import default_config
from zsad.config import RunConfig, parse_config, to_pairs
from zsad.errors import ConfigError, FormatError
from zsad.model import ZeroShotDetector
from zsad.training import train


def test_default_file_matches_dataclass_defaults():
    assert default_config() == RunConfig()
    assert default_config().encoder.hierarchy_layers == (2, 3, 4, 6)


def test_config_round_trip_and_replace():
    cfg = RunConfig().replace(**{"train.epochs": 3, "hsf.variant": "legacy", "temperature": 0.5,
                                 "encoder.hierarchy_layers": (1, 6), "prompt.enable_static": False})
    assert parse_config(cfg.dumps()) == cfg
    assert cfg.train.epochs == 3 and cfg.encoder.hierarchy_layers == (1, 6) and not cfg.prompt.enable_static
    assert cfg.digest() != RunConfig().digest()
    assert len(to_pairs(cfg)) == len(cfg.dumps().splitlines())


def test_config_errors():
    for text in ("bogus=1", "train.nope=1", "nosection.x=1", "train.epochs=abc", "justtext",
                 "prompt.enable_static=maybe", "temperature=0"):
        with pytest.raises(ConfigError):
            parse_config(text)
    assert parse_config("# comment\n\ntrain.epochs = 2  # trailing\n").train.epochs == 2


@pytest.fixture(scope="module")
def trained(squares32):
    model = ZeroShotDetector(RunConfig().replace(**{"train.max_steps": 3}))
    _, _, opt = train(model, squares32)
    return model, opt


def test_checkpoint_round_trip(tmp_path, trained):
    model, opt = trained
    save_checkpoint(tmp_path / "a.ckpt", model, opt)
    m2, o2 = load_checkpoint(tmp_path / "a.ckpt")
    for (n, p), (n2, p2) in zip(model.named_parameters(), m2.named_parameters()):
        assert n == n2 and torch.equal(p, p2) and p.requires_grad == p2.requires_grad
    for n, v in opt.velocity.items():
        assert torch.equal(v, o2.velocity[n])
    save_checkpoint(tmp_path / "b.ckpt", m2, o2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert m2.cfg == model.cfg and m2.frozen_digest() == model.frozen_digest()


def test_checkpoint_contents(trained):
    model, opt = trained
    cfg, vocab, tensors = decode_checkpoint(encode_checkpoint(model, opt))
    assert any(n.startswith("encoder.") for n in tensors)
    assert {n for n in tensors if n.startswith("optim.velocity.")} == {
        "optim.velocity." + n for n in model.trainable_parameters()}
    assert vocab.words == model.vocab.words


def test_checkpoint_rejects_corruption(trained):
    buf = encode_checkpoint(*trained)
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(MAGIC + struct.pack("<I", 99) + buf[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:-5])
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"\x00")
    flipped = bytearray(buf)
    flipped[50] ^= 0xFF  # inside the config text
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(flipped))
