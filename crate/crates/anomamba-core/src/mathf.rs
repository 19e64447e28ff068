//! Scalar float routines, routed through libm so std and no_std builds
//! produce bit-identical results.

#[inline]
pub fn expf(x: f32) -> f32 {
    libm::expf(x)
}

#[inline]
pub fn lnf(x: f32) -> f32 {
    libm::logf(x)
}

#[inline]
pub fn ln_1pf(x: f32) -> f32 {
    libm::log1pf(x)
}

#[inline]
pub fn sqrtf(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline]
pub fn powf(x: f32, y: f32) -> f32 {
    libm::powf(x, y)
}

#[inline]
pub fn floorf(x: f32) -> f32 {
    libm::floorf(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn exp_m1(x: f64) -> f64 {
    libm::expm1(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoidf(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + expf(-x))
    } else {
        let e = expf(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: ln(1 + e^x), linear for large x.
#[inline]
pub fn softplusf(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        expf(x)
    } else {
        ln_1pf(expf(x))
    }
}

/// Inverse of softplus on the positive axis: x = ln(e^y - 1).
#[inline]
pub fn softplus_invf(y: f32) -> f32 {
    debug_assert!(y > 0.0);
    if y > 20.0 {
        y
    } else {
        lnf(expf(y) - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        for i in -40..=40 {
            let x = i as f32 * 0.5;
            let s = sigmoidf(x);
            assert!((s + sigmoidf(-x) - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn softplus_positive_and_invertible() {
        for i in -30..=30 {
            let x = i as f32 * 0.7;
            let y = softplusf(x);
            assert!(y > 0.0, "softplus({x}) = {y} not positive");
            if y > 1e-4 {
                assert!((softplus_invf(y) - x).abs() < 1e-3);
            }
        }
    }
}
