# Command-line scripts
