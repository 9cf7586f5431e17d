import pytest

from modvlad import config as cf


def test_presets_have_documented_shapes():
    tiny, desk, full = cf.preset("tiny"), cf.preset("desk"), cf.preset("paper")
    assert (tiny.model.n_visual, tiny.model.groups, tiny.model.clusters, tiny.model.expansion,
            tiny.model.hidden, tiny.model.class_count) == (16, 2, 4, 2, 32, 10)
    assert (desk.model.n_visual, desk.model.groups, desk.model.clusters, desk.model.hidden,
            desk.model.class_count) == (64, 4, 16, 128, 50)
    assert (full.model.groups, full.model.clusters, full.model.expansion, full.model.hidden,
            full.model.class_count) == (8, 128, 2, 2048, 1000)
    assert full.model.pooled_dim() == 32768 + 64 * (2 * 128 // 8)
    for p in (tiny, desk, full):
        p.model.validate()
        p.corpus.validate()


def test_full_scale_training_presets():
    p = cf.preset("paper")
    assert (p.finetune.batch_size, p.finetune.base_lr, p.finetune.lr_decay,
            p.finetune.decay_every_examples, p.finetune.epochs) == (512, 2e-4, 0.8, 1_000_000, 10)
    assert (p.finetune.dropout_rate, p.finetune.l2_penalty) == (0.75, 1e-4)
    assert (p.pretrain.batch_size, p.pretrain.max_steps, p.pretrain.dropout_rate) == (80, 500_000, 0.5)


def test_preset_copies_are_independent():
    p = cf.preset("tiny")
    p.model.hidden = 7
    assert cf.preset("tiny").model.hidden == 32


def test_overrides_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ncorpus.num_videos = 30\nseed=4\npretrain.base_lr=1e-2\nmodel.tree_shape=(4, 3)\n")
    p = cf.resolve("tiny", path, {"pretrain.base_lr": "0.5", "model.global_norm": "true"})
    assert p.corpus.num_videos == 30
    assert p.corpus.seed == p.pretrain.seed == p.finetune.seed == 4
    assert p.pretrain.base_lr == 0.5
    assert p.model.tree_shape == (4, 3) and p.model.global_norm is True


def test_model_follows_corpus_shapes():
    p = cf.apply_overrides(cf.preset("tiny"), {"corpus.class_count": "7", "corpus.n_visual": "12"})
    assert (p.model.class_count, p.model.n_visual) == (7, 12)


def test_value_model_override():
    p = cf.apply_overrides(cf.preset("tiny"), {"pipeline.value_model.vid_exponent": "0.5"})
    assert p.pipeline.value_model.vid_exponent == 0.5


@pytest.mark.parametrize("kv", [{"nosection": "1"}, {"bogus.key": "1"}, {"model.nope": "1"},
                                {"model.hidden": "abc"}, {"model.global_norm": "maybe"}])
def test_bad_overrides(kv):
    with pytest.raises(cf.ConfigError):
        cf.apply_overrides(cf.preset("tiny"), kv)


def test_bad_line_and_unknown_preset():
    with pytest.raises(cf.ConfigError, match=":2:"):
        cf.parse_kv_text("a.b=1\nno equals sign\n")
    with pytest.raises(cf.ConfigError):
        cf.preset("huge")


@pytest.mark.parametrize("name", ["tiny", "desk", "paper"])
def test_to_kv_round_trip(name):
    p = cf.preset(name)
    p.model.tree_shape = (3,) if name == "tiny" else ()
    again = cf.apply_overrides(cf.preset(name), cf.to_kv(p))
    assert cf.to_kv(again) == cf.to_kv(p)
