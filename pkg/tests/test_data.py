import numpy as np
import pytest

from attriprompt.config import RunConfig, config_from_text, parse_key_values
from attriprompt.data import (
    PALETTE,
    SyntheticSpec,
    class_triples,
    dataset_bytes,
    generate_synthetic,
    load_dataset,
    load_spec,
    load_with_split,
    render,
    save_dataset,
    write_generated,
)
from attriprompt.errors import ConfigError, FormatError, GenerationError


def test_counting_example():
    spec = SyntheticSpec(n_colors=3, n_shapes=3, n_textures=1, n_novel=2, samples_per_class=4, shots=2)
    ds, split = generate_synthetic(spec)
    assert len(ds.class_names) == 9
    assert len(split.base_classes) == 7 and len(split.novel_classes) == 2
    triples = class_triples(spec)
    for f in range(3):
        assert {triples[c][f] for c in split.base_classes} == {t[f] for t in triples}


def test_split_shape():
    ds, split = generate_synthetic(SyntheticSpec())
    assert len(ds.class_names) == 18 and len(split.novel_classes) == 4
    assert len(split.train_indices) == 14 * 8
    assert not set(split.base_classes) & set(split.novel_classes)
    assert {int(ds.labels[i]) for i in split.train_indices} <= set(split.base_classes)
    assert not set(split.train_indices) & set(split.test_indices)
    assert ds.images.shape == (18 * 20, 3, 32, 32)


def test_infeasible_split():
    with pytest.raises(GenerationError):
        generate_synthetic(SyntheticSpec(n_colors=2, n_shapes=2, n_textures=1, n_novel=3))


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(n_colors=1, n_shapes=1, n_textures=3).validate()
    with pytest.raises(ConfigError):
        SyntheticSpec(shots=20).validate()


def test_noise_free_generation_is_byte_identical(tmp_path):
    spec = SyntheticSpec(noise_std=0.0, samples_per_class=3, shots=1)
    write_generated(tmp_path / "a.atpd", *generate_synthetic(spec))
    write_generated(tmp_path / "b.atpd", *generate_synthetic(spec))
    assert (tmp_path / "a.atpd").read_bytes() == (tmp_path / "b.atpd").read_bytes()
    assert (tmp_path / "a.atpd.split").read_bytes() == (tmp_path / "b.atpd.split").read_bytes()


def test_mean_pixel_statistics():
    sigma = 0.05
    rng = np.random.default_rng(0)
    within, checks = 0, 0
    for _ in range(100):
        img, mask = render("blue", "square", "solid", 32, sigma, rng)
        n = int(mask.sum())
        for c in range(3):
            dev = abs(img[c][mask].mean() - PALETTE["blue"][c])
            within += dev <= 3 * sigma / np.sqrt(n)
            checks += 1
    # each check holds with probability 0.9973 under Gaussian noise
    assert within / checks >= 0.99


def test_dataset_round_trip_and_length_checks(tmp_path):
    ds, _ = generate_synthetic(SyntheticSpec(samples_per_class=3, shots=1))
    path = tmp_path / "d.atpd"
    save_dataset(path, ds)
    back = load_dataset(path)
    assert back.class_names == ds.class_names
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert dataset_bytes(back) == path.read_bytes()
    blob = path.read_bytes()
    (tmp_path / "short").write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "magic")


def test_missing_split_sidecar(tmp_path):
    ds, _ = generate_synthetic(SyntheticSpec(samples_per_class=3, shots=1))
    save_dataset(tmp_path / "d.atpd", ds)
    with pytest.raises(FormatError):
        load_with_split(tmp_path / "d.atpd")


def test_spec_file(tmp_path):
    (tmp_path / "s.txt").write_text("n_colors = 2\nseed = 4  # comment\n")
    spec = load_spec(tmp_path / "s.txt")
    assert spec.n_colors == 2 and spec.seed == 4
    (tmp_path / "bad.txt").write_text("n_colours = 2\n")
    with pytest.raises(ConfigError):
        load_spec(tmp_path / "bad.txt")


def test_config_text_round_trip():
    cfg = RunConfig().replace(M=6, k=3, lambda1=0.25, base_lr=0.0123456789, seed=11)
    assert config_from_text(cfg.to_text()) == cfg
    assert cfg.retrieval.pool_size == 6 and cfg.seed == 11


def test_config_errors():
    with pytest.raises(ConfigError, match="lamda2"):
        config_from_text("lamda2 = 3\n")
    with pytest.raises(ConfigError):
        parse_key_values("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        config_from_text("top_k = two\n")
    with pytest.raises(ConfigError):
        config_from_text("top_k = 5\n")
