// Placeholder entry point; filled in once the experiment modules land.
int main() { return 0; }
