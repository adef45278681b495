use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scenario::ObjectClass;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Describes an accident.
    Positive,
    /// Describes accident-free driving.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub id: usize,
    pub text: String,
    pub polarity: Polarity,
}

impl TextPrompt {
    pub fn new(id: usize, text: impl Into<String>, polarity: Polarity) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(invalid("prompt text must be non-empty"));
        }
        Ok(Self { id, text, polarity })
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }

    /// Road user named in the prompt, if any.
    pub fn subject(&self) -> Option<ObjectClass> {
        self.tokens()
            .filter_map(ObjectClass::from_name)
            .find(|c| *c != ObjectClass::Ego)
    }
}

/// The closed pool of conditioning prompts; ids are positions in the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPool {
    prompts: Vec<TextPrompt>,
}

impl PromptPool {
    pub fn new(texts: impl IntoIterator<Item = (String, Polarity)>) -> Result<Self> {
        let prompts = texts
            .into_iter()
            .enumerate()
            .map(|(id, (t, p))| TextPrompt::new(id, t, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { prompts })
    }

    /// One accident template ("ego-car hits a <object>") and one
    /// accident-free template ("<object> moves straight") per road user.
    pub fn toy() -> Self {
        let pos = ObjectClass::ROAD_USERS
            .iter()
            .map(|c| (format!("ego-car hits a {}", c.name()), Polarity::Positive));
        let neg = ObjectClass::ROAD_USERS
            .iter()
            .map(|c| (format!("{} moves straight", c.name()), Polarity::Negative));
        Self::new(pos.chain(neg)).expect("templates are non-empty")
    }

    pub fn prompts(&self) -> &[TextPrompt] {
        &self.prompts
    }

    pub fn get(&self, id: usize) -> Option<&TextPrompt> {
        self.prompts.get(id)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn with_polarity(&self, polarity: Polarity) -> impl Iterator<Item = &TextPrompt> {
        self.prompts.iter().filter(move |p| p.polarity == polarity)
    }

    /// Prompt of the given polarity naming `subject`.
    pub fn find(&self, polarity: Polarity, subject: ObjectClass) -> Option<&TextPrompt> {
        self.with_polarity(polarity).find(|p| p.subject() == Some(subject))
    }

    /// Uniform draw among the prompts of `polarity`.
    pub fn sample<R: Rng>(&self, polarity: Polarity, rng: &mut R) -> Result<&TextPrompt> {
        let matching: Vec<&TextPrompt> = self.with_polarity(polarity).collect();
        if matching.is_empty() {
            return Err(invalid(format!("prompt pool has no {polarity:?} prompt")));
        }
        Ok(matching[rng.random_range(0..matching.len())])
    }

    /// Sorted unique whitespace tokens of every prompt.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .prompts
            .iter()
            .flat_map(|p| p.tokens().map(str::to_string))
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_pool_layout() {
        let pool = PromptPool::toy();
        assert_eq!(pool.len(), 16);
        assert_eq!(pool.with_polarity(Polarity::Positive).count(), 8);
        assert_eq!(pool.get(0).unwrap().text, "ego-car hits a car");
        assert_eq!(pool.get(8).unwrap().subject(), Some(ObjectClass::Car));
        assert_eq!(pool.find(Polarity::Negative, ObjectClass::Bus).unwrap().text, "bus moves straight");
    }

    #[test]
    fn singleton_pool_returns_its_prompt() {
        let pool = PromptPool::new([("ego-car hits a van".to_string(), Polarity::Positive)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pool.sample(Polarity::Positive, &mut rng).unwrap().id, 0);
    }

    #[test]
    fn missing_polarity_is_rejected() {
        let pool = PromptPool::new([("ego-car hits a van".to_string(), Polarity::Positive)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pool.sample(Polarity::Negative, &mut rng).is_err());
        assert!(TextPrompt::new(0, "  ", Polarity::Negative).is_err());
    }

    #[test]
    fn draws_are_uniform_within_three_sigma() {
        let pool = PromptPool::new(
            ["a car", "a bus", "a van", "a truck"]
                .into_iter()
                .map(|t| (t.to_string(), Polarity::Negative))
                .chain([("ego-car hits a car".to_string(), Polarity::Positive)]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let p = pool.sample(Polarity::Negative, &mut rng).unwrap();
            assert_eq!(p.polarity, Polarity::Negative);
            counts[p.id] += 1;
        }
        // binomial(n, 1/4): sigma = sqrt(n p (1-p))
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - 0.25 * n as f64).abs() < 3.0 * sigma, "{counts:?}");
        }
    }
}
