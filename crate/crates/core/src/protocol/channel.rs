use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dp::EmbeddingBatch;
use crate::numerics::Matrix;

/// The only payloads that cross a party boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RoundMessage {
    /// Released (post-noise) embeddings from a passive party.
    EmbeddingUp { party: usize, batch_index: u64, batch: EmbeddingBatch },
    /// Gradient of the head loss with respect to a party's released embeddings.
    GradientDown { party: usize, batch_index: u64, grad: Matrix },
}

impl RoundMessage {
    pub fn party(&self) -> usize {
        match self {
            RoundMessage::EmbeddingUp { party, .. } | RoundMessage::GradientDown { party, .. } => {
                *party
            }
        }
    }

    pub fn batch_index(&self) -> u64 {
        match self {
            RoundMessage::EmbeddingUp { batch_index, .. }
            | RoundMessage::GradientDown { batch_index, .. } => *batch_index,
        }
    }
}

type Tap = Box<dyn FnMut(&RoundMessage) + Send>;
type Filter = Box<dyn FnMut(&RoundMessage) -> bool + Send>;

/// In-process message transport. A tap observes every message; a filter may
/// drop messages (returning `false`), which simulates a lost delivery.
#[derive(Default)]
pub struct Channel {
    queue: Vec<RoundMessage>,
    tap: Option<Tap>,
    filter: Option<Filter>,
}

impl fmt::Debug for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel")
            .field("queued", &self.queue.len())
            .field("tap", &self.tap.is_some())
            .field("filter", &self.filter.is_some())
            .finish()
    }
}

impl Channel {
    pub fn set_tap(&mut self, tap: impl FnMut(&RoundMessage) + Send + 'static) {
        self.tap = Some(Box::new(tap));
    }

    pub fn set_filter(&mut self, filter: impl FnMut(&RoundMessage) -> bool + Send + 'static) {
        self.filter = Some(Box::new(filter));
    }

    pub fn clear_hooks(&mut self) {
        self.tap = None;
        self.filter = None;
    }

    pub fn send(&mut self, message: RoundMessage) {
        if let Some(tap) = self.tap.as_mut() {
            tap(&message);
        }
        if let Some(filter) = self.filter.as_mut() {
            if !filter(&message) {
                return;
            }
        }
        self.queue.push(message);
    }

    /// Removes and returns every queued message.
    pub fn drain(&mut self) -> Vec<RoundMessage> {
        std::mem::take(&mut self.queue)
    }
}
