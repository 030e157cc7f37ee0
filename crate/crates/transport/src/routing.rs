use std::fmt;
use std::str::FromStr;

use icu_core::{Modality, RecordEnvelope};

/// `cart.<cart_id>.<MODALITY>`; one broker queue per distinct key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoutingKey(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RoutingKeyError {
    #[error("routing key `{0}` is not of the form cart.<cart_id>.<modality>")]
    Shape(String),
    #[error("cart id `{0}` contains `.` or is empty")]
    CartId(String),
}

impl RoutingKey {
    pub fn new(cart_id: &str, modality: Modality) -> Result<Self, RoutingKeyError> {
        if cart_id.is_empty() || cart_id.contains('.') {
            return Err(RoutingKeyError::CartId(cart_id.to_owned()));
        }
        Ok(Self(format!("cart.{cart_id}.{}", modality.as_str())))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(&self) -> (&str, Modality) {
        // Constructed keys are always well-formed.
        let (cart, modality) = split(&self.0).expect("routing key validated at construction");
        (cart, modality)
    }

    pub fn cart_id(&self) -> &str {
        self.parse().0
    }

    pub fn modality(&self) -> Modality {
        self.parse().1
    }
}

fn split(s: &str) -> Option<(&str, Modality)> {
    let rest = s.strip_prefix("cart.")?;
    let (cart, modality) = rest.rsplit_once('.')?;
    if cart.is_empty() || cart.contains('.') {
        return None;
    }
    let modality = Modality::ALL.into_iter().find(|m| m.as_str() == modality)?;
    Some((cart, modality))
}

impl FromStr for RoutingKey {
    type Err = RoutingKeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        split(s)
            .map(|_| RoutingKey(s.to_owned()))
            .ok_or_else(|| RoutingKeyError::Shape(s.to_owned()))
    }
}

impl fmt::Display for RoutingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn route(env: &RecordEnvelope) -> Result<RoutingKey, RoutingKeyError> {
    RoutingKey::new(&env.key.cart_id, env.modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format_rule() {
        let k = RoutingKey::new("c1", Modality::DepthFrame).unwrap();
        assert_eq!(k.as_str(), "cart.c1.DEPTH_FRAME");
        assert_ne!(k, RoutingKey::new("c2", Modality::DepthFrame).unwrap());
        assert_ne!(
            RoutingKey::new("c1", Modality::RgbFrame).unwrap(),
            RoutingKey::new("c2", Modality::RgbFrame).unwrap()
        );
    }

    #[test]
    fn malformed_keys_rejected() {
        for bad in ["cart.c1", "cart..RGB_FRAME", "cart.c1.VIDEO", "truck.c1.EMG", "cart.a.b.EMG"] {
            assert!(bad.parse::<RoutingKey>().is_err(), "{bad}");
        }
        assert!(RoutingKey::new("a.b", Modality::Emg).is_err());
    }

    proptest! {
        #[test]
        fn parse_inverts_route(cart in "[a-z0-9_-]{1,16}", m in 0usize..6) {
            let k = RoutingKey::new(&cart, Modality::ALL[m]).unwrap();
            let reparsed: RoutingKey = k.as_str().parse().unwrap();
            prop_assert_eq!(reparsed.parse(), (cart.as_str(), Modality::ALL[m]));
        }
    }
}
