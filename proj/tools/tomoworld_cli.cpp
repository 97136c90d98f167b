// Placeholder main while the pipeline stages land; replaced by the full CLI.
int main() { return 0; }
