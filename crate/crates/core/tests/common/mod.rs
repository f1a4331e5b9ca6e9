pub mod block_cases;
pub mod oracle;
