# Generated by Django 4.2.7 on 2026-10-17 09:12

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('stage', models.CharField(choices=[('coarse', 'Coarse Stage'), ('fine', 'Fine Stage'), ('supervised', 'Supervised Reference'), ('direct', 'Direct Transfer')], max_length=20)),
                ('output_dir', models.CharField(max_length=500)),
                ('seed', models.BigIntegerField(default=0)),
                ('config_digest', models.CharField(max_length=64)),
                ('manifest_digest', models.CharField(max_length=64)),
                ('manifest', models.JSONField(default=dict)),
                ('status', models.CharField(choices=[('completed', 'Completed'), ('aborted', 'Aborted')], default='completed', max_length=20)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['stage', 'status'], name='training_run_stage_idx'), models.Index(fields=['manifest_digest'], name='training_run_digest_idx')],
            },
        ),
        migrations.CreateModel(
            name='EpochLog',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('epoch', models.PositiveIntegerField()),
                ('phase', models.CharField(max_length=20)),
                ('weights', models.JSONField(blank=True, default=dict)),
                ('losses', models.JSONField(blank=True, default=dict)),
                ('metrics', models.JSONField(blank=True, default=dict)),
                ('teacher_digest', models.CharField(blank=True, max_length=64)),
                ('student_digest', models.CharField(blank=True, max_length=64)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='epochs', to='training.trainingrun')),
            ],
            options={
                'ordering': ['run', 'epoch'],
                'unique_together': {('run', 'epoch')},
            },
        ),
    ]
