use std::sync::Mutex;

/// Single-slot latest-value mailbox: a newer value overwrites an unread one,
/// and each posted value is taken at most once.
#[derive(Debug, Default)]
pub struct Mailbox<T> {
    slot: Mutex<Option<T>>,
}

impl<T> Mailbox<T> {
    pub fn new() -> Self {
        Self { slot: Mutex::new(None) }
    }

    /// Returns the value it replaced, if that one was never taken.
    pub fn post(&self, v: T) -> Option<T> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).replace(v)
    }

    pub fn take(&self) -> Option<T> {
        self.slot.lock().unwrap_or_else(|e| e.into_inner()).take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latest_value_wins_once() {
        let m = Mailbox::new();
        assert_eq!(m.post(1), None);
        assert_eq!(m.post(2), Some(1));
        assert_eq!(m.take(), Some(2));
        assert_eq!(m.take(), None);
    }
}
