import pytest

from gf4d import config
from gf4d.errors import InvalidArgument
from gf4d.synth import SceneSpec
from gf4d.tokenflow import GenerationConfig
from gf4d.trainer import TrainConfig


def test_bare_keys_go_to_the_default_section(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("kind = sphere\nimage_size = 48, 64   # inline comment\n\n[train]\nstatic_iters = 7\n")
    spec = config.load(path, "scene")
    assert spec == SceneSpec(kind="sphere", image_size=(48, 64))
    assert config.load(path, "train", primary="scene").static_iters == 7
    with pytest.raises(InvalidArgument, match="'kind' in \\[train\\]"):
        config.load(path, "train")


def test_types_and_overrides(tmp_path):
    path = tmp_path / "b.cfg"
    path.write_text("[train]\ndensify = off\npair_bias = 0.25\ncoarse_flow_views = 1, 3\n")
    cfg = config.load(path, "train", {"pair_bias": "0.5"})
    assert cfg.densify is False and cfg.pair_bias == 0.5 and cfg.coarse_flow_views == (1, 3)
    gen = config.load(path, "regenerate", config.parse_overrides(["tau=0", "weight_form = printed"]))
    assert gen == GenerationConfig(tau=0, weight_form="printed")


def test_errors_name_the_problem(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("[train]\nstatic_itres = 5\n")
    with pytest.raises(InvalidArgument, match="static_itres"):
        config.load(path, "train")
    path.write_text("[paint]\ncolor = red\n")
    with pytest.raises(InvalidArgument, match="paint"):
        config.load(path, "train")
    path.write_text("[train]\nstatic_iters = many\n")
    with pytest.raises(InvalidArgument, match="static_iters"):
        config.load(path, "train")
    with pytest.raises(InvalidArgument):
        config.parse_overrides(["novalue"])


def test_dump_roundtrips(tmp_path):
    cfg = TrainConfig(static_iters=11, densify=False, coarse_flow_views=(1, 2))
    path = tmp_path / "d.cfg"
    path.write_text("[train]\n" + "\n".join(config.dump(cfg)) + "\n")
    assert config.load(path, "train") == cfg
    spec = SceneSpec(velocity=(0.1, 0.0, -0.2))
    path.write_text("\n".join(config.dump(spec)) + "\n")
    assert config.load(path, "scene") == spec


def test_primary_section_for_bare_keys(tmp_path):
    path = tmp_path / "e.cfg"
    path.write_text("static_iters = 3\n[regenerate]\ntau = 4\n")
    assert config.load(path, "regenerate", primary="train").tau == 4
    assert config.load(path, "train").static_iters == 3
