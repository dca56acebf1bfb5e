use crate::error::{Error, Result};

/// Scene is a `SCENE_SIZE x SCENE_SIZE` square, y pointing up, ground at 0.
pub const SCENE_SIZE: f64 = 20.0;
pub const PIVOT: (f64, f64) = (10.0, 10.5);
pub const PENDULUM_LENGTH: f64 = 4.5;
pub const BALL_RADIUS: f64 = 1.5;
/// Height of the light's track above the pivot.
pub const LIGHT_HEIGHT: f64 = 5.8;
pub const GROUND_Y: f64 = 0.0;

pub const THETA_RANGE: (f64, f64) = (-40.0, 44.0);
pub const PHI_RANGE: (f64, f64) = (60.0, 148.0);

/// Center of the pendulum bob for angle `theta` (degrees, 0 = hanging down).
pub fn ball_center(theta: f64) -> (f64, f64) {
    let t = theta.to_radians();
    (
        PIVOT.0 + PENDULUM_LENGTH * t.sin(),
        PIVOT.1 - PENDULUM_LENGTH * t.cos(),
    )
}

/// Point light on the horizontal track; `phi = 90` is straight above the pivot.
pub fn light_point(phi: f64) -> (f64, f64) {
    (
        PIVOT.0 + LIGHT_HEIGHT * (phi - 90.0).to_radians().tan(),
        PIVOT.1 + LIGHT_HEIGHT,
    )
}

fn ground_intercept(light: (f64, f64), angle: f64) -> Result<f64> {
    let (s, c) = angle.sin_cos();
    if s >= 0.0 {
        return Err(Error::Geometry(format!(
            "ray at {:.3} deg from the light never reaches the ground",
            angle.to_degrees()
        )));
    }
    Ok(light.0 + (GROUND_Y - light.1) * c / s)
}

pub(crate) fn check_range(factor: &'static str, value: f64, range: (f64, f64)) -> Result<()> {
    if value.is_finite() && value >= range.0 && value <= range.1 {
        Ok(())
    } else {
        Err(Error::Domain {
            factor,
            value,
            min: range.0,
            max: range.1,
        })
    }
}

/// `(shadow_length, shadow_position)` of the bob cast from the light onto
/// the ground.
///
/// The position is where the ray through the bob center meets the ground;
/// the length is the span between the ground intercepts of the two rays
/// tangent to the bob.
pub fn derive_shadow(theta: f64, phi: f64) -> Result<(f64, f64)> {
    check_range("pendulum_angle", theta, THETA_RANGE)?;
    check_range("light_angle", phi, PHI_RANGE)?;
    let light = light_point(phi);
    let ball = ball_center(theta);
    let (dx, dy) = (ball.0 - light.0, ball.1 - light.1);
    let dist = dx.hypot(dy);
    if dist <= BALL_RADIUS {
        return Err(Error::Geometry("light inside the pendulum bob".into()));
    }
    let center = dy.atan2(dx);
    let spread = (BALL_RADIUS / dist).asin();
    let a = ground_intercept(light, center - spread)?;
    let b = ground_intercept(light, center + spread)?;
    let position = ground_intercept(light, center)?;
    Ok(((a - b).abs(), position))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertical_pendulum_under_overhead_light_shadows_at_pivot() {
        let (len, pos) = derive_shadow(0.0, 90.0).unwrap();
        assert!((pos - PIVOT.0).abs() < 1e-12);
        assert!(len > 0.0);
    }

    #[test]
    fn position_moves_monotonically_with_light() {
        let mut prev = f64::INFINITY;
        let mut phi = PHI_RANGE.0;
        while phi <= PHI_RANGE.1 {
            let (_, pos) = derive_shadow(0.0, phi).unwrap();
            assert!(pos < prev, "phi {phi}: {pos} !< {prev}");
            prev = pos;
            phi += 0.5;
        }
    }

    #[test]
    fn length_positive_on_full_grid() {
        for t in -40..=44 {
            for p in 60..=148 {
                let (len, _) = derive_shadow(t as f64, p as f64).unwrap();
                assert!(len > 0.0 && len.is_finite());
            }
        }
    }

    #[test]
    fn length_depends_on_both_factors() {
        let base = derive_shadow(0.0, 90.0).unwrap().0;
        assert!((derive_shadow(30.0, 90.0).unwrap().0 - base).abs() > 1e-3);
        assert!((derive_shadow(0.0, 130.0).unwrap().0 - base).abs() > 1e-3);
    }

    #[test]
    fn out_of_range_names_the_factor() {
        match derive_shadow(50.0, 90.0) {
            Err(Error::Domain { factor, .. }) => assert_eq!(factor, "pendulum_angle"),
            other => panic!("{other:?}"),
        }
        match derive_shadow(0.0, 10.0) {
            Err(Error::Domain { factor, .. }) => assert_eq!(factor, "light_angle"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pure_function_bitwise_repeatable() {
        let first = derive_shadow(13.0, 101.0).unwrap();
        for _ in 0..10_000 {
            let again = derive_shadow(13.0, 101.0).unwrap();
            assert_eq!(first.0.to_bits(), again.0.to_bits());
            assert_eq!(first.1.to_bits(), again.1.to_bits());
        }
    }
}
