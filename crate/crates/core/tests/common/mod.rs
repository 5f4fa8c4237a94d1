#![allow(dead_code)]
//! Independent oracles shared by the integration tests.

use evf_core::data::SceneSpec;
use evf_core::nn::ParamStore;
use evf_core::{Mask, Tensor};

/// Brute-force reading of an expression over a scene, written from the
/// grammar description rather than the generator's code.
pub fn oracle_referents(scene: &SceneSpec, expression: &str) -> Vec<usize> {
    let words: Vec<&str> = expression.split_whitespace().collect();
    let color = |o: usize| format!("{:?}", scene.objects[o].color).to_lowercase();
    let shape = |o: usize| format!("{:?}", scene.objects[o].shape).to_lowercase();
    let size = |o: usize| format!("{:?}", scene.objects[o].size).to_lowercase();
    let all: Vec<usize> = (0..scene.objects.len()).collect();
    match words.as_slice() {
        [c, s] => all.into_iter().filter(|&o| color(o) == *c && shape(o) == *s).collect(),
        [z, c, s] => all
            .into_iter()
            .filter(|&o| size(o) == *z && color(o) == *c && shape(o) == *s)
            .collect(),
        [c, s, "on", "the", side] => {
            let cands: Vec<usize> = all.into_iter().filter(|&o| color(o) == *c && shape(o) == *s).collect();
            if cands.len() < 2 {
                return vec![];
            }
            let x = |o: usize| scene.objects[o].center.0;
            cands
                .iter()
                .copied()
                .filter(|&o| {
                    cands
                        .iter()
                        .all(|&p| p == o || if *side == "left" { x(o) < x(p) } else { x(o) > x(p) })
                })
                .collect()
        }
        [s, "above", "the", c, a] => {
            let anchors: Vec<usize> = all
                .iter()
                .copied()
                .filter(|&o| color(o) == *c && shape(o) == *a)
                .collect();
            if anchors.len() != 1 {
                return vec![];
            }
            let y = |o: usize| scene.objects[o].center.1;
            all.into_iter()
                .filter(|&o| o != anchors[0] && shape(o) == *s && y(o) < y(anchors[0]))
                .collect()
        }
        _ => panic!("expression outside the grammar: {expression:?}"),
    }
}

/// Top-most object per pixel, scanning objects from the top of the stack.
pub fn oracle_visible(scene: &SceneSpec, k: usize) -> Mask {
    let n = scene.canvas_size;
    let mut bits = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let top = (0..scene.objects.len()).rev().find(|&o| scene.objects[o].covers(x, y));
            bits.push(top == Some(k));
        }
    }
    Mask::new(n, n, bits).unwrap()
}

/// Copies every parameter of `from` into `to` under `rename(name)`, when
/// that name exists in `to`.
pub fn copy_weights(from: &ParamStore, to: &mut ParamStore, rename: impl Fn(&str) -> Vec<String>) -> usize {
    let mut copied = 0;
    let params: Vec<(String, Tensor)> = from.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    for (name, value) in params {
        for target in rename(&name) {
            if to.id(&target).is_some() {
                to.set(&target, value.clone()).unwrap();
                copied += 1;
            }
        }
    }
    copied
}

/// Straight pixel counting, written independently of `Mask::overlap`.
pub fn naive_metrics(pred: &[Mask], gt: &[Mask]) -> (f64, f64) {
    let (mut si, mut su, mut acc) = (0u64, 0u64, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (mut i, mut u) = (0u64, 0u64);
        for y in 0..p.height {
            for x in 0..p.width {
                let (a, b) = (p.get(y, x), g.get(y, x));
                i += (a && b) as u64;
                u += (a || b) as u64;
            }
        }
        si += i;
        su += u;
        acc += if u == 0 { 1.0 } else { i as f64 / u as f64 };
    }
    let ciou = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    (acc / pred.len() as f64, ciou)
}
