//! Branch power flow in rectangular voltage coordinates.

/// Power `(P, Q)` sent from bus i into a series branch with admittance
/// `g + jb` towards bus j.
pub fn branch_flow(ei: f64, fi: f64, ej: f64, fj: f64, g: f64, b: f64) -> (f64, f64) {
    let sq = ei * ei + fi * fi;
    let re = ei * ej + fi * fj;
    let im = ei * fj - ej * fi;
    (g * sq - g * re + b * im, -b * sq + b * re + g * im)
}

/// Flow with its gradient over `[ei, fi, ej, fj]`.
pub(crate) struct FlowDerivs {
    pub p: f64,
    pub q: f64,
    pub dp: [f64; 4],
    pub dq: [f64; 4],
}

pub(crate) fn flow_derivs(v: [f64; 4], g: f64, b: f64) -> FlowDerivs {
    let [ei, fi, ej, fj] = v;
    let (p, q) = branch_flow(ei, fi, ej, fj, g, b);
    FlowDerivs {
        p,
        q,
        dp: [
            2.0 * g * ei - g * ej + b * fj,
            2.0 * g * fi - g * fj - b * ej,
            -g * ei - b * fi,
            -g * fi + b * ei,
        ],
        dq: [
            -2.0 * b * ei + b * ej + g * fj,
            -2.0 * b * fi + b * fj - g * ej,
            b * ei - g * fi,
            b * fi + g * ei,
        ],
    }
}

/// Constant Hessians of `P` and `Q` over `[ei, fi, ej, fj]`.
pub(crate) fn flow_hessians(g: f64, b: f64) -> ([[f64; 4]; 4], [[f64; 4]; 4]) {
    let hp = [
        [2.0 * g, 0.0, -g, b],
        [0.0, 2.0 * g, -b, -g],
        [-g, -b, 0.0, 0.0],
        [b, -g, 0.0, 0.0],
    ];
    let hq = [
        [-2.0 * b, 0.0, b, g],
        [0.0, -2.0 * b, -g, b],
        [b, -g, 0.0, 0.0],
        [g, b, 0.0, 0.0],
    ];
    (hp, hq)
}
