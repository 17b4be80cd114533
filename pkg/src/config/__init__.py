# Config package for CLIPin Desk
