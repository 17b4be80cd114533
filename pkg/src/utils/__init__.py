# Utils package: checkpoints and reporting
