mod common;

use common::check_recall_against_oracle;
use vrap::eval::{mean_recall, predicted_labels, rank_triplets, recall_at_k, SceneHits};
use vrap::scene::{generate_scenes, BBox, DatasetSchema, Scene, SceneObject, LEFT_OF, RIGHT_OF};
use vrap::sgg::{SggOutput, Subtask};
use vrap::tensor::Tensor;

const M_C: usize = 9;
const M_R: usize = 7;

fn two_object_scene() -> Scene {
    let schema = DatasetSchema::default();
    let objects = vec![
        SceneObject { bbox: BBox::new(10, 10, 40, 40), label: 2 },
        SceneObject { bbox: BBox::new(60, 12, 84, 36), label: 6 },
    ];
    Scene::from_objects(1, objects, &schema)
}

fn row(values: &[(usize, f32)], len: usize) -> Vec<f32> {
    let mut r = vec![0.0; len];
    for &(i, v) in values {
        r[i] = v;
    }
    r
}

fn output(p_c: Vec<Vec<f32>>, p_r: Vec<Vec<f32>>) -> SggOutput {
    let n = p_c.len();
    SggOutput {
        p_c: Tensor::new(vec![n, M_C], p_c.concat()),
        p_r: Tensor::new(vec![n, n - 1, M_R], p_r.concat()),
    }
}

#[test]
fn two_objects_yield_fourteen_candidates_in_hand_sorted_order() {
    let p_c = vec![row(&[(2, 0.8), (0, 0.2)], M_C), row(&[(6, 0.5), (1, 0.5)], M_C)];
    let p_r = vec![row(&[(0, 0.6), (1, 0.4)], M_R), row(&[(0, 0.3), (1, 0.7)], M_R)];
    let ranked = rank_triplets(&output(p_c, p_r), Subtask::SgCls);
    assert_eq!(ranked.len(), 14);
    // 0.5·0.7·0.8 = 0.28, 0.8·0.6·0.5 = 0.24, 0.8·0.4·0.5 = 0.16, 0.5·0.3·0.8 = 0.12
    let head: Vec<(usize, usize, usize)> = ranked.iter().take(4).map(|c| (c.subject, c.object, c.predicate)).collect();
    assert_eq!(head, vec![(1, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0)]);
    let want = [0.28f32, 0.24, 0.16, 0.12];
    for (c, w) in ranked.iter().zip(want) {
        assert!((c.score - w).abs() < 1e-6, "{c:?}");
    }
    // zero-score tail follows the (subject, object, predicate) order
    let tail: Vec<(usize, usize, usize)> = ranked[4..].iter().map(|c| (c.subject, c.object, c.predicate)).collect();
    let expect: Vec<(usize, usize, usize)> =
        (2..7).map(|p| (0, 1, p)).chain((2..7).map(|p| (1, 0, p))).collect();
    assert_eq!(tail, expect);
    assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn recall_hand_example_top_one_correct_is_one_half() {
    let scene = two_object_scene();
    assert_eq!(scene.predicate(0, 1), LEFT_OF);
    assert_eq!(scene.predicate(1, 0), RIGHT_OF);
    let p_c = vec![row(&[(2, 1.0)], M_C), row(&[(6, 1.0)], M_C)];
    let p_r = vec![row(&[(LEFT_OF, 0.9), (RIGHT_OF, 0.1)], M_R), row(&[(RIGHT_OF, 0.4), (LEFT_OF, 0.6)], M_R)];
    let out = output(p_c, p_r);
    let ranked = rank_triplets(&out, Subtask::SgCls);
    let labels = predicted_labels(&out);
    assert_eq!(recall_at_k(&ranked, &scene, &labels, 1, Subtask::SgCls), 0.5);
    // (1,0,left_of) outranks the correct (1,0,right_of)
    assert_eq!(recall_at_k(&ranked, &scene, &labels, 2, Subtask::SgCls), 0.5);
    assert_eq!(recall_at_k(&ranked, &scene, &labels, 3, Subtask::SgCls), 1.0);
}

#[test]
fn wrong_labels_never_count_under_sgcls() {
    let scene = two_object_scene();
    let p_c = vec![row(&[(3, 1.0)], M_C), row(&[(6, 1.0)], M_C)];
    let p_r = vec![row(&[(LEFT_OF, 1.0)], M_R), row(&[(RIGHT_OF, 1.0)], M_R)];
    let out = output(p_c, p_r);
    let labels = predicted_labels(&out);
    let sg = rank_triplets(&out, Subtask::SgCls);
    let pc = rank_triplets(&out, Subtask::PredCls);
    assert_eq!(recall_at_k(&sg, &scene, &labels, 14, Subtask::SgCls), 0.0);
    assert_eq!(recall_at_k(&pc, &scene, &labels, 14, Subtask::PredCls), 1.0);
}

#[test]
fn perfect_predcls_model_and_k1_bound() {
    let schema = DatasetSchema::default();
    for scene in generate_scenes(9, 0, 30, &schema).unwrap() {
        let n = scene.n();
        let p_c: Vec<Vec<f32>> = scene.objects.iter().map(|o| row(&[(o.label, 1.0)], M_C)).collect();
        let p_r: Vec<Vec<f32>> = scene.relations.iter().map(|r| row(&[(r.predicate, 1.0)], M_R)).collect();
        let out = output(p_c, p_r);
        let ranked = rank_triplets(&out, Subtask::PredCls);
        let labels = scene.labels();
        assert_eq!(recall_at_k(&ranked, &scene, &labels, n * (n - 1), Subtask::PredCls), 1.0);
        assert!(recall_at_k(&ranked, &scene, &labels, 1, Subtask::PredCls) <= 1.0 / (n * (n - 1)) as f64);
    }
}

#[test]
fn mean_recall_hand_two_scene_two_predicate_example() {
    let mut a = SceneHits { hits: vec![vec![0; M_R]], totals: vec![0; M_R] };
    a.totals[LEFT_OF] = 1;
    a.totals[RIGHT_OF] = 1;
    a.hits[0][LEFT_OF] = 1;
    let mut b = SceneHits { hits: vec![vec![0; M_R]], totals: vec![0; M_R] };
    b.totals[LEFT_OF] = 1;
    b.totals[RIGHT_OF] = 2;
    b.hits[0][RIGHT_OF] = 1;
    // left_of 1/2, right_of 1/3; the five absent predicates are skipped
    let got = mean_recall(&[a.clone(), b.clone()], 0);
    assert!((got - 5.0 / 12.0).abs() < 1e-12, "{got}");
    assert_eq!(a.recall(0), 0.5);
    assert!((b.recall(0) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mean_recall_of_a_single_predicate_equals_pooled_recall() {
    let mk = |hit: usize, total: usize| {
        let mut s = SceneHits { hits: vec![vec![0; M_R]], totals: vec![0; M_R] };
        s.hits[0][LEFT_OF] = hit;
        s.totals[LEFT_OF] = total;
        s
    };
    let set = [mk(1, 2), mk(0, 1), mk(3, 3)];
    assert!((mean_recall(&set, 0) - 4.0 / 6.0).abs() < 1e-12);
}

#[test]
fn recall_matches_exhaustive_oracle_on_100_small_scenes() {
    let checked = check_recall_against_oracle(31, 100).unwrap();
    assert!(checked >= 2 * 100 * 3);
}
