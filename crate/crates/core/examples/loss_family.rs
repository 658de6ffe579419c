//! Loss value, target probability and target-row gradient norm of each
//! margin loss for one embedding.

use dropclass::head::{loss_and_grads, HeadMatrix, LossKind, LossSpec};
use ndarray::Array1;

fn main() -> dropclass::Result<()> {
    let head = HeadMatrix::<f64>::init(8, 4, 3)?;
    let h = Array1::from(vec![0.8, -0.3, 0.5, 0.1]);
    let label = 2;
    for kind in LossKind::ALL {
        let spec = LossSpec::default_for(kind, head.n_classes());
        let out = loss_and_grads(h.view(), head.weight.view(), label, &spec)?;
        let g = out.grad_w.row(label);
        println!(
            "{kind:>10} s={:<6.3} m={:<5.2} loss {:>9.4}  p(target) {:.4}  |dL/dw_y| {:.4}",
            spec.scale,
            spec.margin,
            out.loss,
            out.probs[label],
            g.dot(&g).sqrt()
        );
    }
    Ok(())
}
