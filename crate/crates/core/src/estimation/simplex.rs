//! Nelder-Mead minimization over an unconstrained plane.

pub(crate) struct Minimum {
    pub point: [f64; 2],
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) struct Settings {
    pub max_iter: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

pub(crate) fn minimize<F>(f: F, start: [f64; 2], settings: &Settings) -> Minimum
where
    F: Fn([f64; 2]) -> f64,
{
    let h = settings.initial_step;
    let mut simplex: Vec<([f64; 2], f64)> = [start, [start[0] + h, start[1]], [start[0], start[1] + h]]
        .into_iter()
        .map(|x| (x, f(x)))
        .collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0], simplex[2]);
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| (x[0] - best.0[0]).abs().max((x[1] - best.0[1]).abs()))
            .fold(0.0, f64::max);
        if (worst.1 - best.1).abs() <= settings.f_tol && size <= settings.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid = lerp(simplex[0].0, simplex[1].0, 0.5);
        let reflected = lerp(centroid, worst.0, -REFLECT);
        let f_reflected = f(reflected);

        if f_reflected < best.1 {
            let expanded = lerp(centroid, worst.0, -EXPAND);
            let f_expanded = f(expanded);
            simplex[2] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
            continue;
        }
        if f_reflected < simplex[1].1 {
            simplex[2] = (reflected, f_reflected);
            continue;
        }

        let (contracted, f_contracted) = if f_reflected < worst.1 {
            let x = lerp(centroid, reflected, CONTRACT);
            (x, f(x))
        } else {
            let x = lerp(centroid, worst.0, CONTRACT);
            (x, f(x))
        };
        if f_contracted < worst.1.min(f_reflected) {
            simplex[2] = (contracted, f_contracted);
            continue;
        }

        for vertex in simplex.iter_mut().skip(1) {
            let x = lerp(best.0, vertex.0, SHRINK);
            *vertex = (x, f(x));
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    Minimum {
        point: simplex[0].0,
        value: simplex[0].1,
        iterations,
        converged,
    }
}
