//! Fixed-size worker pool. Results are collected in input order, so outputs
//! do not depend on the schedule or the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub struct Workers {
    pool: rayon::ThreadPool,
}

impl Workers {
    /// `threads = 0` uses one thread per core.
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Workers { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Applies `f` to every item; the first error in input order wins.
    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Result<Vec<U>>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U> + Sync,
    {
        let results: Vec<Result<U>> = self.pool.install(|| items.par_iter().map(&f).collect());
        results.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_schedule_independent() {
        let items: Vec<u64> = (0..1000).collect();
        let one = Workers::new(1).unwrap().map(&items, |x| Ok(x * x)).unwrap();
        let many = Workers::new(4).unwrap().map(&items, |x| Ok(x * x)).unwrap();
        assert_eq!(one, many);
        assert_eq!(one[7], 49);
    }

    #[test]
    fn reports_first_error_in_order() {
        let items: Vec<u64> = (0..100).collect();
        let r = Workers::new(4).unwrap().map(&items, |&x| {
            if x % 10 == 3 {
                Err(Error::Config(format!("bad {x}")))
            } else {
                Ok(x)
            }
        });
        assert!(matches!(r, Err(Error::Config(m)) if m == "bad 3"));
    }
}
