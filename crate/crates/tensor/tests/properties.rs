use cq_tensor::{ConvSpec, Graph, Tensor};
use proptest::prelude::*;

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.conv(xv, wv, None, spec).unwrap();
    g.value(y).clone()
}

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(
        x in tensor(&[1, 2, 5, 5]),
        y in tensor(&[1, 2, 5, 5]),
        w in tensor(&[3, 2, 3, 3]),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        dil in 1usize..3,
    ) {
        let spec = ConvSpec::new(&[3, 3], 2, 3).with_dilation(&[dil, dil]);
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv(&mix, &w, &spec);
        let (cx, cy) = (conv(&x, &w, &spec), conv(&y, &w, &spec));
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_sums_to_one_per_location(x in tensor(&[2, 3, 4, 4]), shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let xv = g.input(x.map(|v| v * 10.0 + shift));
        let s = g.softmax(xv).unwrap();
        let d = g.value(s).data();
        for b in 0..2 {
            for p in 0..16 {
                let total: f64 = (0..3).map(|c| d[(b * 3 + c) * 16 + p]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn repeated_passes_are_bit_identical() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input_with_grad(Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 7919) % 13) as f32 / 13.0).unwrap());
        let w = g.input_with_grad(Tensor::from_fn(&[4, 1, 3, 3], |i| (i as f32 - 18.0) / 36.0).unwrap());
        let y = g.conv(x, w, None, &ConvSpec::new(&[3, 3], 1, 4).with_dilation(&[2, 2])).unwrap();
        let r = g.relu(y);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        (g.value(s).clone(), grads.wrt(x).unwrap().clone(), grads.wrt(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}
