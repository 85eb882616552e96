import dataclasses

import numpy as np
import pytest

from csrep import container
from csrep.graph import branch_group_count, count_params, trunk_conv_count, validate
from csrep.reptdnn import (
    PAPER_MATCH,
    ConfigError,
    RepTdnnConfig,
    build_rep_tdnn,
    config_from_dict,
    load_config,
    paper_match_config,
    paper_match_search,
    plain_param_formula,
    random_init,
    save_config,
)
from csrep.transform import csrep_transform

from conftest import SMALL


@pytest.fixture(scope="module")
def default_model():
    return build_rep_tdnn()


class TestBuild:
    def test_default_validates(self, default_model):
        assert validate(default_model) == []

    def test_sixteen_branch_groups(self, default_model):
        assert branch_group_count(default_model) == 16

    def test_head_contexts(self, default_model):
        heads = [layer.nodes[0].payload.context for layer in default_model.layers
                 if layer.nodes[0].kind == "conv"]
        assert heads == [5, 1, 1, 5]

    def test_interface(self, default_model):
        assert default_model.input_channels == 161
        assert default_model.embedding_dim == 512

    def test_invalid_fields_reported_individually(self):
        cfg = RepTdnnConfig(channels=10, branch_groups=4, head_contexts=(4,), activation="tanh")
        fields = {f for f, _ in cfg.problems()}
        assert fields == {"branch_groups", "head_contexts", "activation"}
        with pytest.raises(ConfigError):
            build_rep_tdnn(cfg)

    def test_no_identity_branch(self):
        m = build_rep_tdnn(dataclasses.replace(SMALL, identity_branch=False))
        assert validate(m) == []
        group = m.layers[1].nodes[0].payload
        assert len(group) == 2 and all(not b.is_identity for b in group)

    @pytest.mark.parametrize("seed", range(8))
    def test_random_valid_configs(self, seed):
        rng = np.random.default_rng(seed)
        ch = int(rng.choice([4, 8, 12]))
        cfg = RepTdnnConfig(input_channels=int(rng.integers(1, 9)), channels=ch,
                            head_contexts=tuple(int(c) for c in rng.choice([1, 3, 5, 7], rng.integers(1, 4))),
                            layers_per_block=int(rng.integers(0, 3)) or 1,
                            branch_groups=int(rng.choice([g for g in (1, 2, 4) if ch % g == 0])),
                            head_groups=int(rng.choice([g for g in (1, 2, 4) if ch % g == 0])),
                            dilation=int(rng.integers(1, 3)), se_bottleneck=2, fc_dim=6, embedding_dim=3,
                            dtype="float64", seed=seed)
        m = build_rep_tdnn(cfg)
        assert validate(m) == []
        plain, _ = csrep_transform(m)
        assert trunk_conv_count(plain) == cfg.blocks * (1 + cfg.layers_per_block)


class TestRandomInit:
    def test_same_seed_same_bytes(self):
        assert container.to_bytes(build_rep_tdnn(SMALL)) == container.to_bytes(build_rep_tdnn(SMALL))

    def test_different_seeds_differ(self):
        other = build_rep_tdnn(dataclasses.replace(SMALL, seed=1))
        assert container.to_bytes(build_rep_tdnn(SMALL)) != container.to_bytes(other)

    def test_reinit_matches_build(self):
        m = build_rep_tdnn(SMALL)
        assert container.to_bytes(random_init(m, SMALL.seed)) == container.to_bytes(m)

    def test_bn_ranges(self, default_model):
        bns = [nd.payload for layer in default_model.layers for nd in layer.nodes if nd.kind == "batchnorm"]
        assert len(bns) == 20
        for bn in bns:
            assert np.all(bn.std >= 0.5) and np.all(bn.std <= 2.0)
            assert np.all(bn.scale >= 0.5) and np.all(bn.scale <= 1.5)


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "c.json"
        save_config(SMALL, path)
        assert load_config(path) == SMALL

    def test_syntax_error_has_line(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{\n  "channels": 8,\n  "seed" 3\n}\n')
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.line == 3

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"channels": 8, "kernel": 3})
        assert info.value.field == "kernel"

    def test_bad_value_names_field(self):
        with pytest.raises(ConfigError) as info:
            config_from_dict({"se_bottleneck": 0})
        assert info.value.field == "se_bottleneck"

    def test_contexts_must_be_list(self):
        with pytest.raises(ConfigError, match="head_contexts"):
            config_from_dict({"head_contexts": 5})


class TestPaperMatch:
    def test_valid(self):
        cfg = paper_match_config()
        assert cfg.problems() == []
        assert 512 % cfg.branch_groups == 0 and 512 % cfg.head_groups == 0

    def test_is_search_winner(self):
        assert paper_match_search()[0][2] == PAPER_MATCH

    @pytest.mark.slow
    def test_built_model_validates(self):
        assert validate(build_rep_tdnn(paper_match_config())) == []


@pytest.mark.parametrize("cfg", [
    SMALL,
    dataclasses.replace(SMALL, branch_groups=4, head_groups=2),
    dataclasses.replace(SMALL, branch_contexts=(5, 3, 1), identity_branch=False),
    dataclasses.replace(SMALL, head_contexts=(3,), layers_per_block=3),
    dataclasses.replace(SMALL, channels=8, branch_groups=8, dilation=2),
])
@pytest.mark.parametrize("bn_stats", [True, False])
def test_plain_formula_matches_count(cfg, bn_stats):
    plain, _ = csrep_transform(build_rep_tdnn(cfg))
    assert count_params(plain, bn_stats=bn_stats) == plain_param_formula(cfg, bn_stats=bn_stats)
