"""Run-config parsing: strict schema, line-numbered errors, stable echo."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchfuse.config import (
    SCHEMA,
    RunConfig,
    load_run_config,
    parse_run_config,
    write_resolved_config,
)
from patchfuse.exceptions import ConfigError


class TestDefaults:
    def test_reduced_preset_values(self):
        cfg = RunConfig.default()
        assert cfg.get("seed") == 0
        assert cfg.get("gen.height") == 1200
        assert cfg.get("gen.width") == 1600
        assert cfg.counts() == (12, 18)
        assert cfg.get("vit.image_size") == 32
        assert cfg.get("cnn.input_size") == 64
        assert cfg.get("fusion.threshold") == 0.30
        assert cfg.get("eval.k") == 5
        assert cfg.get("eval.flip_fraction") == 0.0

    def test_empty_text_is_a_valid_config(self):
        cfg = parse_run_config("")
        assert cfg.to_text() == RunConfig.default().to_text()

    def test_unknown_key_in_get(self):
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.default().get("gen.bogus")


class TestParsing:
    def test_comments_and_blank_lines_skipped(self):
        cfg = parse_run_config("# a comment\n\n  \nseed=9\n# another\n")
        assert cfg.get("seed") == 9

    def test_typed_values(self):
        cfg = parse_run_config(
            "gen.lesion_count=2,4\n"
            "gen.lesion_radius=150,200.5\n"
            "gen.benign_color=0.1,0.2,0.3\n"
            "cnn.strides=1,1,1\n"
            "vit.lr=1e-3\n"
            "out.dir=some/where\n"
        )
        assert cfg.get("gen.lesion_count") == (2, 4)
        assert cfg.get("gen.lesion_radius") == (150.0, 200.5)
        assert cfg.get("gen.benign_color") == (0.1, 0.2, 0.3)
        assert cfg.get("cnn.strides") == (1, 1, 1)
        assert cfg.get("vit.lr") == 1e-3
        assert cfg.get("out.dir") == "some/where"

    def test_spaces_around_separator(self):
        cfg = parse_run_config("  seed = 5 \n")
        assert cfg.get("seed") == 5

    def test_unknown_key_reports_line_number(self):
        with pytest.raises(ConfigError, match=r"line 3: unknown key 'bogus'") as err:
            parse_run_config("# header\nseed=1\nbogus=2\n")
        assert err.value.line == 3

    def test_missing_separator_reports_line_number(self):
        with pytest.raises(ConfigError, match=r"line 2: expected key=value"):
            parse_run_config("seed=1\njust words\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match=r"line 2: duplicate key 'seed'"):
            parse_run_config("seed=1\nseed=2\n")

    def test_bad_int_reports_key_and_line(self):
        with pytest.raises(ConfigError, match=r"line 1: seed: expected an integer"):
            parse_run_config("seed=soon\n")

    def test_bad_tuple_arity(self):
        with pytest.raises(ConfigError, match="expected 3 comma-separated"):
            parse_run_config("gen.benign_color=0.1,0.2\n")

    def test_bad_float_element(self):
        with pytest.raises(ConfigError, match=r"line 1: gen.lesion_radius"):
            parse_run_config("gen.lesion_radius=a,b\n")


class TestEcho:
    def test_echo_lists_every_key_once(self):
        lines = RunConfig.default().to_text().splitlines()
        assert len(lines) == len(SCHEMA)
        keys = [line.partition("=")[0] for line in lines]
        assert keys == list(SCHEMA)

    def test_echo_is_a_parse_fixpoint(self):
        text = RunConfig.default().to_text()
        assert parse_run_config(text).to_text() == text

    def test_overrides_echoed(self):
        cfg = parse_run_config("seed=3\nvit.epochs=7\n")
        text = cfg.to_text()
        assert "seed=3\n" in text
        assert "vit.epochs=7\n" in text
        assert parse_run_config(text).to_text() == text

    def test_file_roundtrip(self, tmp_path):
        cfg = parse_run_config("seed=42\ngen.n_benign=3\n")
        path = tmp_path / "resolved.cfg"
        write_resolved_config(path, cfg)
        loaded = load_run_config(path)
        assert loaded.to_text() == cfg.to_text()
        assert loaded.get("gen.n_benign") == 3


class TestReplace:
    def test_replace_layers_overrides(self):
        base = parse_run_config("seed=1\nvit.epochs=5\n")
        out = base.replace({"seed": 2})
        assert out.get("seed") == 2
        assert out.get("vit.epochs") == 5
        assert base.get("seed") == 1

    def test_replace_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.default().replace({"nope": 1})


class TestTypedViews:
    def test_generator_spec_wiring(self):
        cfg = parse_run_config(
            "gen.height=400\ngen.width=800\ngen.margin=40\n"
            "gen.lesion_radius=120,160\ngen.lesion_count=1,2\nseed=9\n"
        )
        spec = cfg.generator_spec()
        assert (spec.height, spec.width, spec.margin) == (400, 800, 40)
        assert spec.lesion_radius == (120.0, 160.0)
        assert spec.seed == 9
        assert cfg.generator_spec(seed=4).seed == 4

    def test_model_configs(self):
        cfg = parse_run_config("vit.image_size=16\nvit.sub_patch=8\ncnn.input_size=32\n")
        assert cfg.vit_config().image_size == 16
        assert cfg.vit_config().grid == 2
        assert cfg.cnn_config().input_size == 32
        assert cfg.fusion_config().threshold == 0.30

    def test_experiment_config_wiring(self):
        cfg = parse_run_config(
            "eval.k=3\nseed=5\nvit.epochs=2\ncnn.epochs=4\neval.flip_fraction=0.25\n"
        )
        exp = cfg.experiment_config()
        assert exp.k == 3
        assert exp.seed == 5
        assert exp.vit_epochs == 2
        assert exp.cnn_epochs == 4
        assert exp.flip_fraction == 0.25
        assert cfg.experiment_config(seed=8).seed == 8

    def test_invalid_combination_surfaces_from_dataclass(self):
        cfg = parse_run_config("vit.image_size=30\nvit.sub_patch=8\n")
        with pytest.raises(ConfigError, match="not divisible"):
            cfg.vit_config()


def _value_strategy(kind):
    ints = st.integers(min_value=0, max_value=10**6)
    floats = st.floats(
        min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False
    )
    if kind == "int":
        return ints
    if kind == "float":
        return floats
    if kind == "int2":
        return st.tuples(ints, ints)
    if kind == "int3":
        return st.tuples(ints, ints, ints)
    if kind == "float2":
        return st.tuples(floats, floats)
    if kind == "float3":
        return st.tuples(floats, floats, floats)
    return st.text(alphabet="abcdefg/._-", min_size=1, max_size=12).filter(
        lambda s: s.strip() == s and not s.startswith("#")
    )


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_parse_echo_roundtrip_property(data):
    keys = data.draw(
        st.lists(st.sampled_from(sorted(SCHEMA)), min_size=1, max_size=8, unique=True)
    )
    values = {key: data.draw(_value_strategy(SCHEMA[key][0]), label=key) for key in keys}
    cfg = RunConfig.from_mapping(values)
    reparsed = parse_run_config(cfg.to_text())
    for key, value in values.items():
        # repr of a finite float parses back exactly, so == is the right check
        assert reparsed.get(key) == value
    assert reparsed.to_text() == cfg.to_text()
