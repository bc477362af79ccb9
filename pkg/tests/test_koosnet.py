import csv

import numpy as np
import pytest
import torch

from msfusion.checkpoint import param_checksum
from msfusion.contrastive import ProjectionHead
from msfusion.errors import ValidationError
from msfusion.koosnet import (
    FinetuneConfig,
    KOOS_PROFILES,
    KoosClassifier,
    KoosPrediction,
    SubjectSample,
    finetune,
    load_koos,
    predict_cohort,
    predict_subject,
    save_koos,
    select_slabs,
)
from msfusion.msfnet import PROFILES, build_model
from msfusion.phantom import PhantomSpec, generate_cohort
from msfusion.volume import LabeledVolume, Slab, extract_slabs


def make_classifier(seed=0, enc_profile="tiny", profile="toy"):
    enc = build_model(enc_profile, seed=seed)
    torch.manual_seed(seed)
    return KoosClassifier(enc.encoder, enc.profile, KOOS_PROFILES[profile])


def subject_slabs(subj, side="a"):
    lv = subj.a if side == "a" else subj.b
    return extract_slabs(lv)


@pytest.fixture(scope="module")
def koos_cohort():
    return generate_cohort(PhantomSpec(seed=81, shape=(8, 16, 16)), 4, balance_grades=True)


class TestForward:
    def test_zero_input_logits_equal_fc_bias(self):
        clf = make_classifier()
        with torch.no_grad():
            for name, p in clf.named_parameters():
                if name.endswith("bias") and not name.startswith("fc."):
                    p.zero_()
        slabs = [Slab(np.zeros((3, 16, 16), dtype=np.float32), "s", i,
                      masks={"vs": np.zeros((3, 16, 16), dtype=np.uint8)}) for i in range(4)]
        with torch.no_grad():
            logits = clf.subject_logits(slabs)
        np.testing.assert_allclose(logits.numpy(), clf.fc.bias.detach().numpy(), atol=1e-6)

    def test_duplicating_slabs_leaves_prediction_unchanged(self, koos_cohort):
        clf = make_classifier()
        slabs = subject_slabs(koos_cohort[0])
        p1 = predict_subject(clf, slabs, "s")
        p2 = predict_subject(clf, slabs + slabs, "s")
        np.testing.assert_allclose(p1.logits, p2.logits, atol=1e-5)
        assert p1.grade == p2.grade

    def test_slab_order_invariance(self, koos_cohort):
        clf = make_classifier()
        slabs = subject_slabs(koos_cohort[0])
        p1 = predict_subject(clf, slabs, "s")
        p2 = predict_subject(clf, list(reversed(slabs)), "s")
        np.testing.assert_allclose(p1.logits, p2.logits, atol=1e-5)

    def test_softmax_of_logits_normalized(self, koos_cohort):
        clf = make_classifier()
        pred = predict_subject(clf, subject_slabs(koos_cohort[0]), "s")
        probs = torch.softmax(torch.tensor(pred.logits), dim=0)
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_grade_is_argmax_plus_one(self):
        pred = KoosPrediction.from_logits("s", [0.1, 2.0, -1.0, 0.5])
        assert pred.grade == 2

    def test_mask_shape_mismatch_rejected(self):
        clf = make_classifier()
        x = torch.zeros(2, 3, 16, 16)
        with pytest.raises(ValidationError):
            clf.slab_features(x, torch.zeros(2, 1, 8, 8))

    def test_missing_mask_rejected(self):
        clf = make_classifier()
        bare = [Slab(np.zeros((3, 16, 16), dtype=np.float32), "s", 0)]
        with pytest.raises(ValidationError):
            clf.subject_logits(bare)


class TestSelectSlabs:
    def test_prefers_largest_tumor_slices(self, koos_cohort):
        slabs = subject_slabs(koos_cohort[3])  # grade-4 subject, big tumor
        chosen = select_slabs(slabs, 3)
        areas_all = [(s.center_mask("vs") == 1).sum() for s in slabs]
        areas_chosen = [(s.center_mask("vs") == 1).sum() for s in chosen]
        assert len(chosen) == 3
        assert min(areas_chosen) >= np.partition(areas_all, -3)[-3]

    def test_no_limit_returns_all(self, koos_cohort):
        slabs = subject_slabs(koos_cohort[0])
        assert select_slabs(slabs, 0) == slabs
        assert select_slabs(slabs, len(slabs) + 5) == slabs


class TestFinetune:
    def test_freeze_contract(self, koos_cohort):
        clf = make_classifier(seed=1)
        subjects = [SubjectSample(s.subject_id, subject_slabs(s, "a"),
                                  subject_slabs(s, "b"), s.grade) for s in koos_cohort]
        enc_before = param_checksum(clf.encoder)
        ench_before = param_checksum(clf.enc_h)
        fc_before = param_checksum(clf.fc)
        finetune(clf, subjects, FinetuneConfig(epochs=3, seed=0))
        assert param_checksum(clf.encoder) == enc_before
        assert param_checksum(clf.enc_h) == ench_before
        assert param_checksum(clf.fc) != fc_before

    def test_unfreeze_flag_trains_high_level_encoder(self, koos_cohort):
        clf = make_classifier(seed=1)
        subjects = [SubjectSample(s.subject_id, subject_slabs(s, "a"),
                                  subject_slabs(s, "b"), s.grade) for s in koos_cohort]
        enc_before = param_checksum(clf.encoder)
        ench_before = param_checksum(clf.enc_h)
        finetune(clf, subjects, FinetuneConfig(epochs=3, seed=0, unfreeze=True))
        assert param_checksum(clf.encoder) == enc_before  # translation encoder always frozen
        assert param_checksum(clf.enc_h) != ench_before

    def test_fc_fits_separable_toy_set(self):
        # four subjects, one per grade, with hand-made separable features:
        # the linear head alone must reach 100% training accuracy
        clf = make_classifier(seed=2)

        class FixedFeatureClassifier(KoosClassifier):
            def subject_feature(self, slabs):
                grade = slabs[0].grade
                e = torch.zeros(self.profile.feat_dim)
                e[grade - 1] = 3.0
                return e

        clf.__class__ = FixedFeatureClassifier
        subjects = []
        for g in (1, 2, 3, 4):
            slab = Slab(np.zeros((3, 8, 8), dtype=np.float32), f"g{g}", 0,
                        masks={"vs": np.zeros((3, 8, 8), dtype=np.uint8)}, grade=g)
            subjects.append(SubjectSample(f"g{g}", [slab], [slab], g))
        finetune(clf, subjects, FinetuneConfig(epochs=50, lr=0.05, batch_size=4, seed=0))
        correct = 0
        for s in subjects:
            with torch.no_grad():
                pred = int(clf.subject_logits(s.slabs_a).argmax()) + 1
            correct += pred == s.grade
        assert correct == 4

    def test_requires_annotated_subjects(self, koos_cohort):
        clf = make_classifier()
        bare = [SubjectSample("s", subject_slabs(koos_cohort[0]), subject_slabs(koos_cohort[0], "b"), None)]
        with pytest.raises(ValidationError):
            finetune(clf, bare, FinetuneConfig(epochs=1))


class TestPredictCohort:
    def test_empty_cohort_writes_header_only(self, tmp_path):
        clf = make_classifier()
        preds, errors = predict_cohort(clf, {}, tmp_path / "koos.csv")
        assert preds == [] and errors == {}
        lines = (tmp_path / "koos.csv").read_text().strip().splitlines()
        assert lines == ["subject_id,grade,logit_1,logit_2,logit_3,logit_4"]

    def test_one_row_per_subject(self, koos_cohort, tmp_path):
        clf = make_classifier()
        cohort = {s.subject_id: subject_slabs(s, "b") for s in koos_cohort}
        preds, errors = predict_cohort(clf, cohort, tmp_path / "koos.csv")
        assert len(preds) == len(cohort) and not errors
        with open(tmp_path / "koos.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(cohort)
        assert all(r["grade"] in "1234" for r in rows)

    def test_missing_mask_recorded_and_cohort_continues(self, koos_cohort, tmp_path):
        clf = make_classifier()
        good = subject_slabs(koos_cohort[0])
        bad = [Slab(s.channels, s.subject_id, s.slice_index) for s in subject_slabs(koos_cohort[1])]
        preds, errors = predict_cohort(clf, {"good": good, "bad": bad}, tmp_path / "koos.csv")
        assert [p.subject_id for p in preds] == ["good"]
        assert set(errors) == {"bad"}


class TestCheckpoint:
    def test_round_trip_with_heads(self, tmp_path):
        clf = make_classifier(seed=5)
        heads = (ProjectionHead(clf.profile.feat_dim, clf.profile.proj_dim),
                 ProjectionHead(clf.profile.feat_dim, clf.profile.proj_dim))
        save_koos(tmp_path / "k.ckpt", clf, seed=5, heads=heads)
        loaded, loaded_heads, manifest = load_koos(tmp_path / "k.ckpt")
        assert param_checksum(loaded) == param_checksum(clf)
        assert loaded_heads is not None
        assert param_checksum(loaded_heads[0]) == param_checksum(heads[0])
        assert manifest["kind"] == "koosnet"
