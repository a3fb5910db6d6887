//! Reverse-mode gradients on a small expression, a finite-difference check,
//! and a second derivative taken by differentiating a gradient node.

use fairx::autodiff::{check_gradient, Binding, Tape};

fn main() {
    // f(x, y) = tanh(x * y) + softplus(x) / (1 + y^2)
    let mut t = Tape::new();
    let x = t.input(0.7);
    let y = t.input(-1.3);
    let xy = t.mul(x, y);
    let a = t.tanh(xy);
    let sp = t.softplus(x);
    let y2 = t.mul(y, y);
    let one = t.constant(1.0);
    let den = t.add(one, y2);
    let b = t.div(sp, den);
    let f = t.add(a, b);

    let g = t.gradient(f, &[x, y]).unwrap();
    println!("f = {:.6}", t.value(f));
    println!("df/dx = {:.6}, df/dy = {:.6}", t.value(g[0]), t.value(g[1]));

    let report = check_gradient(&t, f, &Binding::current(&t), 1e-6, 1e-6);
    println!(
        "finite differences agree: {} (max relative error {:.2e})",
        report.passed(),
        report.max_rel_error()
    );

    let hess_row = t.gradient(g[0], &[x, y]).unwrap();
    println!(
        "d2f/dx2 = {:.6}, d2f/dxdy = {:.6}",
        t.value(hess_row[0]),
        t.value(hess_row[1])
    );
    let second = check_gradient(&t, g[0], &Binding::current(&t), 1e-6, 1e-5);
    println!("second derivatives agree: {}", second.passed());
}
