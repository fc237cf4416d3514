// Placeholder entry point; subcommands land with the remaining modules.
int main() { return 0; }
